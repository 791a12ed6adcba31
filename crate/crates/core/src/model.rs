//! Closed-form densities, scores and guiding-field derivatives for isotropic
//! mixtures evolved under the forward Ornstein–Uhlenbeck process.
//!
//! A component `N(m, s^2 I)` observed at forward time `tau` becomes
//! `N(a m, (s^2 a^2 + 1 - a^2) I)` with `a = exp(-tau)`. Point masses are
//! components with `s^2 = 0`; they are valid only for `tau > 0`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, dot, log_sum_exp};

/// Class label attached to each mixture component.
pub type ClassLabel = u32;

pub const DEFAULT_HORIZON: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic variance `s^2`; zero encodes a point mass.
    pub variance: f64,
    pub class: ClassLabel,
}

/// Weighted isotropic mixture `p_0` partitioned into classes.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureModel {
    dim: usize,
    horizon: f64,
    components: Vec<Component>,
    log_weights: Vec<f64>,
    priors: BTreeMap<ClassLabel, f64>,
}

/// Per-component parameters of the forward marginal at one forward time.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardLaw {
    pub tau: f64,
    pub component_means: Vec<Vec<f64>>,
    pub component_vars: Vec<f64>,
}

/// On-disk model description.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub dim: usize,
    #[serde(rename = "T", default = "default_horizon")]
    pub horizon: f64,
    pub components: Vec<Component>,
}

fn default_horizon() -> f64 {
    DEFAULT_HORIZON
}

/// Full evaluation of a (sub-)mixture at one point: log density, component
/// responsibilities and per-component scores. Used wherever Hessians are
/// needed; the hot paths use the allocation-free [`MixtureModel::drift_terms`].
#[derive(Clone, Debug)]
pub struct MixtureEval {
    pub log_density: f64,
    pub indices: Vec<usize>,
    pub resp: Vec<f64>,
    pub vars: Vec<f64>,
    /// `(a m_i - x) / v_i` for each selected component, flattened row-major.
    pub comp_scores: Vec<f64>,
    pub score: Vec<f64>,
}

impl MixtureEval {
    /// `(grad^2 log p) v = sum_i r_i (s_i <s_i, v> - v / v_i) - g <g, v>`
    pub fn hessian_vp(&self, v: &[f64]) -> Vec<f64> {
        let d = v.len();
        let mut out = vec![0.0; d];
        for (j, (&r, &var)) in self.resp.iter().zip(&self.vars).enumerate() {
            if r == 0.0 {
                continue;
            }
            let s = &self.comp_scores[j * d..(j + 1) * d];
            let sv = dot(s, v);
            for k in 0..d {
                out[k] += r * (s[k] * sv - v[k] / var);
            }
        }
        let gv = dot(&self.score, v);
        axpy(-gv, &self.score, &mut out);
        out
    }
}

impl MixtureModel {
    /// Builds a model, checking every invariant. Weights must already sum to
    /// one within `1e-12`.
    pub fn new(dim: usize, horizon: f64, components: Vec<Component>) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be positive");
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return invalid(format!("horizon T must be positive, got {horizon}"));
        }
        if components.is_empty() {
            return invalid("mixture needs at least one component");
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if !(c.weight.is_finite() && c.weight > 0.0) {
                return invalid(format!("component {i}: weight must be positive"));
            }
            if c.mean.len() != dim {
                return invalid(format!(
                    "component {i}: mean has length {}, expected {dim}",
                    c.mean.len()
                ));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return invalid(format!("component {i}: mean is not finite"));
            }
            if !(c.variance.is_finite() && c.variance >= 0.0) {
                return invalid(format!("component {i}: variance must be >= 0"));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("weights sum to {total}, expected 1"));
        }
        let mut priors = BTreeMap::new();
        for c in &components {
            *priors.entry(c.class).or_insert(0.0) += c.weight;
        }
        let log_weights = components.iter().map(|c| c.weight.ln()).collect();
        Ok(Self {
            dim,
            horizon,
            components,
            log_weights,
            priors,
        })
    }

    /// Like [`MixtureModel::new`] but rescales the weights to sum to one,
    /// logging a warning when the raw sum is off by more than `1e-9`.
    pub fn normalized(dim: usize, horizon: f64, mut components: Vec<Component>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total.is_finite() && total > 0.0) {
            return invalid("weights must have a positive finite sum");
        }
        if (total - 1.0).abs() > 1e-9 {
            log::warn!("mixture weights sum to {total}; renormalizing");
        }
        for c in &mut components {
            c.weight /= total;
        }
        Self::new(dim, horizon, components)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        Self::normalized(file.dim, file.horizon, file.components)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_model_file(&self) -> ModelFile {
        ModelFile {
            dim: self.dim,
            horizon: self.horizon,
            components: self.components.clone(),
        }
    }

    /// Four isotropic Gaussians: one at the origin (class 0) and three on an
    /// equilateral triangle of circumradius `radius` (classes 1, 2, 3), equal
    /// weights. The first vertex sits on the positive `x2` axis, so the model
    /// is symmetric under `x1 -> -x1`.
    pub fn triangle_mixture(radius: f64, variance: f64, horizon: f64) -> Result<Self> {
        let mut components = vec![Component {
            weight: 0.25,
            mean: vec![0.0, 0.0],
            variance,
            class: 0,
        }];
        for k in 0..3 {
            let angle = PI / 2.0 + 2.0 * PI * k as f64 / 3.0;
            components.push(Component {
                weight: 0.25,
                mean: vec![radius * angle.cos(), radius * angle.sin()],
                variance,
                class: k as ClassLabel + 1,
            });
        }
        Self::new(2, horizon, components)
    }

    /// The default four-Gaussian reference experiment: circumradius 2,
    /// variance 0.5, horizon 5.
    pub fn reference_mixture() -> Self {
        Self::triangle_mixture(2.0, 0.5, DEFAULT_HORIZON).expect("reference mixture is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return invalid(format!("horizon T must be positive, got {horizon}"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn classes(&self) -> Vec<ClassLabel> {
        self.priors.keys().copied().collect()
    }

    pub fn class_prior(&self, class: ClassLabel) -> Result<f64> {
        self.priors
            .get(&class)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown class label {class}")))
    }

    pub fn has_point_masses(&self) -> bool {
        self.components.iter().any(|c| c.variance == 0.0)
    }

    pub fn is_point_mass_model(&self) -> bool {
        self.components.iter().all(|c| c.variance == 0.0)
    }

    /// `R = max_i(|m_i| + 3 s_i)`; reduces to `max_i |m_i|` for atoms.
    pub fn support_radius(&self) -> f64 {
        self.components
            .iter()
            .map(|c| dot(&c.mean, &c.mean).sqrt() + 3.0 * c.variance.sqrt())
            .fold(0.0, f64::max)
    }

    /// Atoms (means) of the given class.
    pub fn class_atoms(&self, class: ClassLabel) -> Result<Vec<&[f64]>> {
        self.class_prior(class)?;
        Ok(self
            .components
            .iter()
            .filter(|c| c.class == class)
            .map(|c| c.mean.as_slice())
            .collect())
    }

    /// Converts a backward (sampler) time to forward time.
    pub fn forward_time(&self, t_back: f64) -> f64 {
        self.horizon - t_back
    }

    pub fn forward_law(&self, tau: f64) -> Result<ForwardLaw> {
        self.check_tau(tau)?;
        let a = (-tau).exp();
        let noise = -(-2.0 * tau).exp_m1();
        Ok(ForwardLaw {
            tau,
            component_means: self
                .components
                .iter()
                .map(|c| c.mean.iter().map(|m| a * m).collect())
                .collect(),
            component_vars: self
                .components
                .iter()
                .map(|c| c.variance * a * a + noise)
                .collect(),
        })
    }

    fn check_tau(&self, tau: f64) -> Result<()> {
        if !(tau.is_finite() && tau >= 0.0 && tau <= self.horizon * (1.0 + 1e-12)) {
            return invalid(format!(
                "forward time {tau} outside [0, {}]",
                self.horizon
            ));
        }
        if tau == 0.0 && self.has_point_masses() {
            return invalid("point-mass components cannot be evaluated at forward time 0");
        }
        Ok(())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return invalid(format!("point has length {}, expected {}", x.len(), self.dim));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return invalid("point is not finite");
        }
        Ok(())
    }

    fn check_class(&self, class: Option<ClassLabel>) -> Result<()> {
        if let Some(c) = class {
            self.class_prior(c)?;
        }
        Ok(())
    }

    #[inline]
    fn selected(&self, class: Option<ClassLabel>, i: usize) -> bool {
        match class {
            None => true,
            Some(c) => self.components[i].class == c,
        }
    }

    /// Unnormalized component log terms `log w_i + log N(x; a m_i, v_i)`.
    #[inline]
    fn log_term(&self, i: usize, a: f64, noise: f64, x: &[f64]) -> (f64, f64) {
        let comp = &self.components[i];
        let var = comp.variance * a * a + noise;
        let mut dist = 0.0;
        for (xk, mk) in x.iter().zip(&comp.mean) {
            let diff = xk - a * mk;
            dist += diff * diff;
        }
        let l = self.log_weights[i] - 0.5 * self.dim as f64 * (2.0 * PI * var).ln()
            - dist / (2.0 * var);
        (l, var)
    }

    /// Evaluates the whole mixture (`class = None`) or the renormalized
    /// class sub-mixture at forward time `tau`.
    pub fn evaluate(&self, tau: f64, x: &[f64], class: Option<ClassLabel>) -> Result<MixtureEval> {
        self.check_tau(tau)?;
        self.check_point(x)?;
        self.check_class(class)?;
        let a = (-tau).exp();
        let noise = -(-2.0 * tau).exp_m1();
        let d = self.dim;
        let mut indices = Vec::new();
        let mut logs = Vec::new();
        let mut vars = Vec::new();
        for i in 0..self.components.len() {
            if self.selected(class, i) {
                let (l, v) = self.log_term(i, a, noise, x);
                indices.push(i);
                logs.push(l);
                vars.push(v);
            }
        }
        let lse = log_sum_exp(&logs);
        let resp: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
        let mut comp_scores = Vec::with_capacity(indices.len() * d);
        let mut score = vec![0.0; d];
        for (j, &i) in indices.iter().enumerate() {
            let mean = &self.components[i].mean;
            for k in 0..d {
                let s = (a * mean[k] - x[k]) / vars[j];
                comp_scores.push(s);
                score[k] += resp[j] * s;
            }
        }
        let log_norm = match class {
            None => 0.0,
            Some(c) => self.priors[&c].ln(),
        };
        Ok(MixtureEval {
            log_density: lse - log_norm,
            indices,
            resp,
            vars,
            comp_scores,
            score,
        })
    }

    /// `log p_tau(x)`.
    pub fn log_marginal(&self, tau: f64, x: &[f64]) -> Result<f64> {
        Ok(self.evaluate(tau, x, None)?.log_density)
    }

    /// `log p_tau(x | c)`.
    pub fn log_conditional(&self, tau: f64, x: &[f64], class: ClassLabel) -> Result<f64> {
        Ok(self.evaluate(tau, x, Some(class))?.log_density)
    }

    /// `log p_tau(c | x)`, computed directly from the component log terms.
    pub fn log_posterior(&self, tau: f64, x: &[f64], class: ClassLabel) -> Result<f64> {
        self.check_tau(tau)?;
        self.check_point(x)?;
        self.class_prior(class)?;
        let a = (-tau).exp();
        let noise = -(-2.0 * tau).exp_m1();
        let mut all = Vec::with_capacity(self.components.len());
        let mut sel = Vec::new();
        for i in 0..self.components.len() {
            let (l, _) = self.log_term(i, a, noise, x);
            all.push(l);
            if self.components[i].class == class {
                sel.push(l);
            }
        }
        Ok(log_sum_exp(&sel) - log_sum_exp(&all))
    }

    /// `grad log p_tau(x)`.
    pub fn score(&self, tau: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.evaluate(tau, x, None)?.score)
    }

    /// `grad log p_tau(x | c)`.
    pub fn cond_score(&self, tau: f64, x: &[f64], class: ClassLabel) -> Result<Vec<f64>> {
        Ok(self.evaluate(tau, x, Some(class))?.score)
    }

    /// Guiding field `G_t(x) = log p_{T-t}(x|c) - log p_{T-t}(x)` at backward
    /// time `t_back`; equals `log p_{T-t}(c|x) - log p(c)`.
    pub fn guiding_field(&self, t_back: f64, x: &[f64], class: ClassLabel) -> Result<f64> {
        let tau = self.backward_to_forward(t_back)?;
        Ok(self.log_posterior(tau, x, class)? - self.class_prior(class)?.ln())
    }

    /// `grad G_t(x)` = conditional score minus unconditional score.
    pub fn grad_g(&self, t_back: f64, x: &[f64], class: ClassLabel) -> Result<Vec<f64>> {
        let tau = self.backward_to_forward(t_back)?;
        let cond = self.evaluate(tau, x, Some(class))?;
        let all = self.evaluate(tau, x, None)?;
        Ok(cond.score.iter().zip(&all.score).map(|(c, u)| c - u).collect())
    }

    /// `(grad^2 G_t(x)) v`.
    pub fn hess_g_vp(&self, t_back: f64, x: &[f64], class: ClassLabel, v: &[f64]) -> Result<Vec<f64>> {
        let tau = self.backward_to_forward(t_back)?;
        self.check_vector(v)?;
        let cond = self.evaluate(tau, x, Some(class))?;
        let all = self.evaluate(tau, x, None)?;
        let hc = cond.hessian_vp(v);
        let hu = all.hessian_vp(v);
        Ok(hc.iter().zip(&hu).map(|(a, b)| a - b).collect())
    }

    /// `(grad^2 log p_tau(x | c)) v`.
    pub fn hess_log_cond_vp(&self, tau: f64, x: &[f64], class: ClassLabel, v: &[f64]) -> Result<Vec<f64>> {
        self.check_vector(v)?;
        Ok(self.evaluate(tau, x, Some(class))?.hessian_vp(v))
    }

    fn check_vector(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim || v.iter().any(|x| !x.is_finite()) {
            return invalid("direction vector has wrong length or is not finite");
        }
        Ok(())
    }

    fn backward_to_forward(&self, t_back: f64) -> Result<f64> {
        if !(t_back.is_finite() && t_back >= 0.0 && t_back <= self.horizon) {
            return invalid(format!(
                "backward time {t_back} outside [0, {}]",
                self.horizon
            ));
        }
        Ok((self.horizon - t_back).max(0.0))
    }

    /// Tweedie bound on `|grad G_t|^2` at backward time `t_back`:
    /// `4 e^{2(t-T)} R^2 / (1 - e^{2(t-T)})^2`. Diverges at `t_back = T`.
    pub fn grad_g_bound(&self, t_back: f64) -> Result<f64> {
        if !(t_back.is_finite() && t_back >= 0.0 && t_back <= self.horizon) {
            return invalid(format!("backward time {t_back} outside [0, T]"));
        }
        let tau = self.horizon - t_back;
        if tau <= 0.0 {
            return invalid("gradient bound is unbounded at t_back = T");
        }
        let a2 = (-2.0 * tau).exp();
        let denom = -(-2.0 * tau).exp_m1();
        let r = self.support_radius();
        Ok(4.0 * a2 * r * r / (denom * denom))
    }

    /// Allocation-free evaluation used by the integrators and the PDE solver:
    /// writes `grad log p_tau(x|c)` into `cond_score` and `grad G` into
    /// `grad_g`. Inputs are not validated beyond debug assertions.
    pub fn drift_terms(
        &self,
        tau: f64,
        x: &[f64],
        class: ClassLabel,
        cond_score: &mut [f64],
        grad_g: &mut [f64],
    ) {
        debug_assert_eq!(x.len(), self.dim);
        let a = (-tau).exp();
        let noise = -(-2.0 * tau).exp_m1();
        self.streaming_score(a, noise, x, Some(class), cond_score);
        self.streaming_score(a, noise, x, None, grad_g);
        for (g, c) in grad_g.iter_mut().zip(cond_score.iter()) {
            *g = c - *g;
        }
    }

    /// Online log-sum-exp accumulation of the score; returns the unnormalized
    /// log density.
    fn streaming_score(
        &self,
        a: f64,
        noise: f64,
        x: &[f64],
        class: Option<ClassLabel>,
        out: &mut [f64],
    ) -> f64 {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut max = f64::NEG_INFINITY;
        let mut total = 0.0;
        for i in 0..self.components.len() {
            if !self.selected(class, i) {
                continue;
            }
            let (l, var) = self.log_term(i, a, noise, x);
            if l > max {
                let rescale = if max == f64::NEG_INFINITY { 0.0 } else { (max - l).exp() };
                total *= rescale;
                out.iter_mut().for_each(|v| *v *= rescale);
                max = l;
            }
            let e = (l - max).exp();
            total += e;
            let mean = &self.components[i].mean;
            for k in 0..x.len() {
                out[k] += e * (a * mean[k] - x[k]) / var;
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
        max + total.ln()
    }
}
