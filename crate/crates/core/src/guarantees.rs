//! Numerical checks of the guarantees of guided sampling.
//!
//! Along a guided path the process
//!
//! ```text
//! S_t = p(c) / p_{T-t}(c | Y_t) * exp( int_0^t 2 w_s |grad G_s(Y_s)|^2 ds )
//! ```
//!
//! is a positive supermartingale (a martingale before the horizon). The
//! functions here estimate `E[S_k]`, the Doob exceedance probability, the
//! discrete residual of the Itô identity for `G_t(Y_t)`, the decomposition of
//! the expected log-posterior gain, the path-space KL integral, and the
//! distance of terminal samples to the conditional support. Posteriors always
//! come from the analytic mixture, never from exponentiated `G` values.
//!
//! Every statistical contract is a three-sigma band around a Monte Carlo
//! estimate; [`Check`] records the statistic, bound and standard error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{dot, norm};
use crate::model::{ClassLabel, MixtureModel};
use crate::schedule::{GuidancePolicy, GuidanceSchedule, NoGuidance};
use crate::sde::{simulate, simulate_batch, BatchSpec, Method, PathNoise, TimeGrid, Trajectory};
use crate::stats::Estimate;

/// Three-sigma bands throughout.
pub const SIGMA_BAND: f64 = 3.0;

/// `I_k = int_0^{t_k} 2 w |grad G|^2`, accumulated with the quadrature that
/// matches the integrator (trapezoid for Heun, left Riemann for Euler).
pub fn running_integral(traj: &Trajectory) -> Vec<f64> {
    let n = traj.grid.len();
    let f: Vec<f64> = (0..n).map(|k| 2.0 * traj.w_values[k] * traj.grad_g_norm_sq(k)).collect();
    let mut out = vec![0.0; n];
    for k in 0..n - 1 {
        let dt = traj.grid.dt(k);
        let inc = match traj.method {
            Method::Euler => dt * f[k],
            Method::Heun => 0.5 * dt * (f[k] + f[k + 1]),
        };
        out[k + 1] = out[k] + inc;
    }
    out
}

/// `log p_{T-t_k}(c | Y_k)` at every node.
pub fn log_posteriors(model: &MixtureModel, traj: &Trajectory) -> Result<Vec<f64>> {
    traj.grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(k, &t)| model.log_posterior(model.forward_time(t).max(0.0), traj.state(k), traj.class))
        .collect()
}

/// `S_k` at every node of one path.
pub fn stochastic_exponential(model: &MixtureModel, traj: &Trajectory) -> Result<Vec<f64>> {
    let log_prior = model.class_prior(traj.class)?.ln();
    let integral = running_integral(traj);
    let post = log_posteriors(model, traj)?;
    Ok(post
        .iter()
        .zip(&integral)
        .map(|(lp, i)| (log_prior - lp + i).exp())
        .collect())
}

/// Per-path `S_k` and `I_k` for a batch plus per-node summaries.
#[derive(Clone, Debug, Serialize)]
pub struct MartingaleDiagnostics {
    pub nodes: Vec<f64>,
    /// `paths x nodes`
    pub s_values: Vec<Vec<f64>>,
    pub running_integrals: Vec<Vec<f64>>,
    pub s_means: Vec<Estimate>,
}

impl MartingaleDiagnostics {
    pub fn compute(model: &MixtureModel, batch: &[Trajectory]) -> Result<Self> {
        if batch.is_empty() {
            return invalid("empty batch");
        }
        let per_path: Vec<(Vec<f64>, Vec<f64>)> = batch
            .par_iter()
            .map(|traj| Ok((stochastic_exponential(model, traj)?, running_integral(traj))))
            .collect::<Result<_>>()?;
        let (s_values, running_integrals): (Vec<_>, Vec<_>) = per_path.into_iter().unzip();
        let n = batch[0].grid.len();
        let s_means = (0..n)
            .map(|k| Estimate::from_samples(&s_values.iter().map(|s| s[k]).collect::<Vec<_>>()))
            .collect();
        Ok(Self {
            nodes: batch[0].grid.nodes().to_vec(),
            s_values,
            running_integrals,
            s_means,
        })
    }

    /// Largest `|E[S_k] - 1|` in units of its standard error over the
    /// interior nodes `0..N`, and the one-sided excess `(E[S_N] - 1)/stderr`
    /// at the last node.
    pub fn z_scores(&self) -> (f64, f64) {
        let z = |e: &Estimate, two_sided: bool| {
            let dev = if two_sided { (e.mean - 1.0).abs() } else { e.mean - 1.0 };
            if e.stderr > 0.0 {
                dev / e.stderr
            } else if dev.abs() <= 1e-12 {
                0.0
            } else {
                dev.signum() * f64::INFINITY
            }
        };
        let n = self.s_means.len();
        let interior = self.s_means[..n - 1].iter().map(|e| z(e, true)).fold(0.0, f64::max);
        (interior, z(&self.s_means[n - 1], false))
    }

    /// Fraction of paths on which `S_k > 1/delta` at some node, that is,
    /// `p(Y|c)/p(Y) < delta * exp(I_k)`.
    pub fn doob_exceedance(&self, delta: f64) -> Result<Estimate> {
        if !(delta > 0.0 && delta < 1.0) {
            return invalid("delta must lie in (0, 1)");
        }
        let hits = self
            .s_values
            .iter()
            .filter(|s| s.iter().any(|v| *v * delta > 1.0))
            .count();
        Ok(Estimate::proportion(hits, self.s_values.len()))
    }
}

/// Exceedance probability of the Doob bound at level `delta`.
pub fn doob_check(diag: &MartingaleDiagnostics, delta: f64) -> Result<Check> {
    let e = diag.doob_exceedance(delta)?;
    // the binomial stderr at the nominal level keeps the band nonzero when no path exceeds
    let se = (delta * (1.0 - delta) / e.n as f64).sqrt();
    Ok(Check::upper(format!("doob_delta_{delta}"), e.mean, delta, se))
}

/// Sum over steps of `dG - (1 + 2w)|grad G|^2 dt - sqrt(2) <grad G, dB>`.
pub fn path_ito_residual(model: &MixtureModel, traj: &Trajectory) -> Result<f64> {
    let nodes = traj.grid.nodes();
    let mut g_prev = model.guiding_field(nodes[0], traj.state(0), traj.class)?;
    let mut total = 0.0;
    for k in 0..traj.grid.steps() {
        let g_next = model.guiding_field(nodes[k + 1], traj.state(k + 1), traj.class)?;
        let grad = traj.grad_g(k);
        total += g_next
            - g_prev
            - (1.0 + 2.0 * traj.w_values[k]) * traj.grad_g_norm_sq(k) * traj.grid.dt(k)
            - std::f64::consts::SQRT_2 * dot(grad, traj.noise.increment(k));
        g_prev = g_next;
    }
    Ok(total)
}

#[derive(Clone, Debug, Serialize)]
pub struct ItoStudy {
    pub steps: Vec<usize>,
    pub mean_abs_residual: Vec<Estimate>,
    /// `mean_abs_residual[i] / mean_abs_residual[i + 1]`
    pub ratios: Vec<f64>,
}

impl ItoStudy {
    /// Residual either vanishes identically or halves (within `band`) under
    /// every refinement.
    pub fn passes(&self, band: (f64, f64)) -> bool {
        if self.mean_abs_residual.iter().all(|e| e.mean <= 1e-12) {
            return true;
        }
        self.ratios.iter().all(|r| *r >= band.0 && *r <= band.1)
    }
}

pub const ITO_RATIO_BAND: (f64, f64) = (1.3, 2.7);

/// Residual of the Itô identity on `base` and `levels` successive halvings,
/// all driven by the same Brownian paths (sampled on the finest grid and
/// summed up to coarser ones).
pub fn ito_residual_study<P: GuidancePolicy + ?Sized>(
    model: &MixtureModel,
    policy: &P,
    class: ClassLabel,
    base: &TimeGrid,
    levels: usize,
    spec: &BatchSpec,
) -> Result<ItoStudy> {
    spec.validate()?;
    let finest = base.refine(1 << levels)?;
    let grids: Vec<TimeGrid> = (0..=levels).map(|l| base.refine(1 << l)).collect::<Result<_>>()?;
    let per_path: Vec<Vec<f64>> = (0..spec.n_paths)
        .into_par_iter()
        .map(|i| {
            let fine = spec.noise(i, &finest, model.dim());
            grids
                .iter()
                .enumerate()
                .map(|(l, g)| {
                    let noise = fine.coarsen(1 << (levels - l))?;
                    let traj = simulate(model, policy, class, g, &noise, spec.method)?;
                    Ok(path_ito_residual(model, &traj)?.abs())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mean_abs_residual: Vec<Estimate> = (0..=levels)
        .map(|l| Estimate::from_samples(&per_path.iter().map(|r| r[l]).collect::<Vec<_>>()))
        .collect();
    let ratios = mean_abs_residual.windows(2).map(|w| w[0].mean / w[1].mean).collect();
    Ok(ItoStudy {
        steps: grids.iter().map(|g| g.steps()).collect(),
        mean_abs_residual,
        ratios,
    })
}

/// Expected log-posterior gain against the accumulated `(1+2w)|grad G|^2`.
#[derive(Clone, Debug, Serialize)]
pub struct GainDecomposition {
    /// `log p(c|Y_N) - log p(c|Y_0)`
    pub gain: Estimate,
    /// `sum_k q_k (1 + 2 w_k) |grad G_k|^2`
    pub drift_integral: Estimate,
    /// Paired per-path difference of the two.
    pub difference: Estimate,
}

impl GainDecomposition {
    pub fn compute(model: &MixtureModel, batch: &[Trajectory]) -> Result<Self> {
        let rows: Vec<(f64, f64)> = batch
            .par_iter()
            .map(|traj| {
                let n = traj.grid.len();
                let nodes = traj.grid.nodes();
                let first = model.log_posterior(model.forward_time(nodes[0]), traj.state(0), traj.class)?;
                let last = model.log_posterior(model.forward_time(nodes[n - 1]), traj.state(n - 1), traj.class)?;
                let q = traj.method.quadrature_weights(&traj.grid);
                let integral = (0..n)
                    .map(|k| q[k] * (1.0 + 2.0 * traj.w_values[k]) * traj.grad_g_norm_sq(k))
                    .sum::<f64>();
                Ok((last - first, integral))
            })
            .collect::<Result<_>>()?;
        let gain: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let integral: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let diff: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
        Ok(Self {
            gain: Estimate::from_samples(&gain),
            drift_integral: Estimate::from_samples(&integral),
            difference: Estimate::from_samples(&diff),
        })
    }

    pub fn check(&self) -> Check {
        Check::two_sided("log_posterior_gain_decomposition", self.difference.mean, 0.0, self.difference.stderr)
    }
}

/// Path-space KL integral against its closed-form cap.
#[derive(Clone, Debug, Serialize)]
pub struct KlReport {
    /// Batch mean of `sum_k q_k w_k^2 |grad G_k|^2`.
    pub empirical: Estimate,
    /// `max(C_max, C_max^2 / (2 C_min)) * log(1/p(c))`
    pub cap: f64,
}

impl KlReport {
    pub fn check(&self) -> Check {
        Check::upper("girsanov_kl_cap", self.empirical.mean, self.cap, self.empirical.stderr)
    }
}

pub fn kl_cap(c_max: f64, c_min: f64, prior: f64) -> f64 {
    c_max.max(c_max * c_max / (2.0 * c_min)) * (1.0 / prior).ln()
}

/// Requires `C_min > 0` and `C_min - 1/2 <= w <= C_max` at every node of
/// every path, and a single class across the batch.
pub fn kl_trajectory_bound(model: &MixtureModel, batch: &[Trajectory], c_max: f64, c_min: f64) -> Result<KlReport> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    if !(c_min > 0.0) || !(c_max >= c_min - 0.5) {
        return invalid(format!("need C_min > 0 and C_max >= C_min - 1/2, got C_min = {c_min}, C_max = {c_max}"));
    }
    let class = batch[0].class;
    let mut samples = Vec::with_capacity(batch.len());
    for traj in batch {
        if traj.class != class {
            return invalid("KL bound needs a single-class batch");
        }
        if let Some(w) = traj.w_values.iter().find(|w| !(**w >= c_min - 0.5 && **w <= c_max)) {
            return invalid(format!("guidance weight {w} outside [C_min - 1/2, C_max]"));
        }
        let q = traj.method.quadrature_weights(&traj.grid);
        samples.push(
            (0..traj.grid.len())
                .map(|k| q[k] * traj.w_values[k].powi(2) * traj.grad_g_norm_sq(k))
                .sum::<f64>(),
        );
    }
    Ok(KlReport {
        empirical: Estimate::from_samples(&samples),
        cap: kl_cap(c_max, c_min, model.class_prior(class)?),
    })
}

/// Distances of terminal states to the atoms of the conditioned class.
#[derive(Clone, Debug, Serialize)]
pub struct SupportReport {
    pub threshold: f64,
    pub distances: Vec<f64>,
    /// 50, 90, 99 percent quantiles and the maximum.
    pub quantiles: [f64; 4],
    pub pass_fraction: Estimate,
}

/// Five standard deviations of the forward noise left at the cutoff.
pub fn support_threshold(cutoff: f64) -> f64 {
    5.0 * (-(-2.0 * cutoff).exp_m1()).sqrt()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Only defined for pure point-mass models.
pub fn support_check(model: &MixtureModel, batch: &[Trajectory], threshold: f64) -> Result<SupportReport> {
    if !model.is_point_mass_model() {
        return invalid("support check needs a model made only of point masses");
    }
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let mut distances = Vec::with_capacity(batch.len());
    for traj in batch {
        let atoms = model.class_atoms(traj.class)?;
        let y = traj.terminal();
        let d = atoms
            .iter()
            .map(|a| norm(&y.iter().zip(a.iter()).map(|(p, q)| p - q).collect::<Vec<_>>()))
            .fold(f64::INFINITY, f64::min);
        distances.push(d);
    }
    let mut sorted = distances.clone();
    sorted.sort_by(f64::total_cmp);
    let inside = distances.iter().filter(|d| **d <= threshold).count();
    Ok(SupportReport {
        threshold,
        quantiles: [
            quantile(&sorted, 0.5),
            quantile(&sorted, 0.9),
            quantile(&sorted, 0.99),
            sorted[sorted.len() - 1],
        ],
        pass_fraction: Estimate::proportion(inside, distances.len()),
        distances,
    })
}

/// Regularized lower incomplete gamma `P(a, x)` by its power series or
/// continued fraction.
fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let ln_gamma_a = ln_gamma(a);
    if x < a + 1.0 {
        let mut sum = 1.0 / a;
        let mut term = sum;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma_a).exp()
    } else {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - (-x + a * x.ln() - ln_gamma_a).exp() * h
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Quantile of the chi-square law with `dof` degrees of freedom.
pub fn chi_square_quantile(dof: usize, q: f64) -> f64 {
    let a = 0.5 * dof as f64;
    let (mut lo, mut hi) = (0.0, 1.0);
    while gamma_p(a, 0.5 * hi) < q {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if gamma_p(a, 0.5 * mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Fraction of terminal states inside the `q`-probability ball of some
/// component of the conditioned class, under the forward law at the cutoff.
/// A diagnostic for Gaussian models, never asserted.
pub fn mass_coverage(model: &MixtureModel, batch: &[Trajectory], q: f64) -> Result<Estimate> {
    if batch.is_empty() {
        return invalid("empty batch");
    }
    let class = batch[0].class;
    let tau = model.forward_time(*batch[0].grid.nodes().last().unwrap());
    let law = model.forward_law(tau)?;
    let r2 = chi_square_quantile(model.dim(), q);
    let members: Vec<usize> = (0..model.components().len())
        .filter(|&i| model.components()[i].class == class)
        .collect();
    let inside = batch
        .iter()
        .filter(|traj| {
            let y = traj.terminal();
            members.iter().any(|&i| {
                let m = &law.component_means[i];
                let d2: f64 = y.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum();
                d2 <= r2 * law.component_vars[i]
            })
        })
        .count();
    Ok(Estimate::proportion(inside, batch.len()))
}

/// Guided against unguided restarts from a common state.
#[derive(Clone, Debug, Serialize)]
pub struct RestartComparison {
    pub guided: Estimate,
    pub unguided: Estimate,
    /// Paired `guided - unguided`.
    pub difference: Estimate,
}

/// Restarts paired bundles from `state` at node `k` of `grid` and compares
/// `E[1 / p(c | Y_{k+m})]` with and without guidance on common noise.
#[allow(clippy::too_many_arguments)]
pub fn inverse_posterior_restart<P: GuidancePolicy + ?Sized>(
    model: &MixtureModel,
    guided: &P,
    class: ClassLabel,
    grid: &TimeGrid,
    k: usize,
    m: usize,
    state: &[f64],
    spec: &BatchSpec,
) -> Result<RestartComparison> {
    spec.validate()?;
    let tail = grid.tail(k)?;
    if m == 0 || m >= tail.len() {
        return invalid("restart horizon must be within the grid");
    }
    let tau = model.forward_time(tail.nodes()[m]);
    let rows: Vec<(f64, f64)> = (0..spec.n_paths)
        .into_par_iter()
        .map(|i| {
            let noise = spec.noise(i, &tail, model.dim()).with_initial(state.to_vec());
            let a = simulate(model, guided, class, &tail, &noise, spec.method)?;
            let b = simulate(model, &NoGuidance, class, &tail, &noise, spec.method)?;
            let inv = |t: &Trajectory| -> Result<f64> { Ok((-model.log_posterior(tau, t.state(m), class)?).exp()) };
            Ok((inv(&a)?, inv(&b)?))
        })
        .collect::<Result<_>>()?;
    let g: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let u: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let d: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    Ok(RestartComparison {
        guided: Estimate::from_samples(&g),
        unguided: Estimate::from_samples(&u),
        difference: Estimate::from_samples(&d),
    })
}

/// One line of the diagnostics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub statistic: f64,
    pub bound: f64,
    pub stderr: f64,
    pub pass: bool,
    /// Reported-only diagnostics never fail a run.
    pub asserted: bool,
}

impl Check {
    /// `statistic <= bound + 3 stderr`
    pub fn upper(name: impl Into<String>, statistic: f64, bound: f64, stderr: f64) -> Self {
        Self {
            name: name.into(),
            statistic,
            bound,
            stderr,
            pass: statistic <= bound + SIGMA_BAND * stderr + 1e-12,
            asserted: true,
        }
    }

    /// `|statistic - target| <= 3 stderr`
    pub fn two_sided(name: impl Into<String>, statistic: f64, target: f64, stderr: f64) -> Self {
        Self {
            name: name.into(),
            statistic,
            bound: target,
            stderr,
            pass: (statistic - target).abs() <= SIGMA_BAND * stderr + 1e-12,
            asserted: true,
        }
    }

    /// `statistic >= bound - 3 stderr`
    pub fn lower(name: impl Into<String>, statistic: f64, bound: f64, stderr: f64) -> Self {
        Self {
            name: name.into(),
            statistic,
            bound,
            stderr,
            pass: statistic >= bound - SIGMA_BAND * stderr - 1e-12,
            asserted: true,
        }
    }

    pub fn reported(mut self) -> Self {
        self.asserted = false;
        self
    }
}

/// Parameters of the full verification suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub class: ClassLabel,
    /// Constant guidance weight of the main batch.
    pub w: f64,
    pub n_paths: usize,
    /// Time-grid node count.
    pub nodes: usize,
    pub cutoff: f64,
    pub seed: u64,
    pub method: Method,
    pub antithetic: bool,
    pub deltas: Vec<f64>,
    pub ito_paths: usize,
    /// Node count of the coarsest grid of the Itô study.
    pub ito_base_nodes: usize,
    pub ito_levels: usize,
    pub c_min: f64,
    /// Guidance weights of the support check on point-mass models.
    pub support_weights: Vec<f64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            class: 0,
            w: 0.5,
            n_paths: 10_000,
            nodes: 257,
            cutoff: crate::sde::DEFAULT_CUTOFF,
            seed: 0,
            method: Method::Heun,
            antithetic: false,
            deltas: vec![0.05, 0.1, 0.5],
            ito_paths: 1_000,
            ito_base_nodes: 33,
            ito_levels: 3,
            c_min: 0.5,
            support_weights: vec![0.0, 1.0, 2.0],
        }
    }
}

/// Runs every check of the suite.
pub fn run_suite(model: &MixtureModel, cfg: &SuiteConfig) -> Result<Vec<Check>> {
    let grid = TimeGrid::uniform(model.horizon(), cfg.nodes, cfg.cutoff)?;
    let schedule = GuidanceSchedule::constant(cfg.w)?;
    let spec = BatchSpec::new(cfg.n_paths, cfg.seed).antithetic(cfg.antithetic).method(cfg.method);
    let batch = simulate_batch(model, &schedule, cfg.class, &grid, &spec)?;
    let mut checks = Vec::new();

    let diag = MartingaleDiagnostics::compute(model, &batch)?;
    let (z_interior, z_last) = diag.z_scores();
    checks.push(Check::upper("martingale_interior_max_z", z_interior, SIGMA_BAND, 0.0));
    checks.push(Check::upper("supermartingale_terminal_z", z_last, SIGMA_BAND, 0.0));
    for &delta in &cfg.deltas {
        checks.push(doob_check(&diag, delta)?);
    }

    let ito_spec = BatchSpec::new(cfg.ito_paths, cfg.seed.wrapping_add(1)).method(Method::Euler);
    let base = TimeGrid::uniform(model.horizon(), cfg.ito_base_nodes, cfg.cutoff)?;
    let study = ito_residual_study(model, &schedule, cfg.class, &base, cfg.ito_levels, &ito_spec)?;
    let vanishing = study.mean_abs_residual.iter().all(|e| e.mean <= 1e-12);
    for (i, r) in study.ratios.iter().enumerate() {
        let mut c = Check::lower(format!("ito_residual_ratio_{}_to_{}", study.steps[i], study.steps[i + 1]), *r, ITO_RATIO_BAND.0, 0.0);
        c.pass = vanishing || (*r >= ITO_RATIO_BAND.0 && *r <= ITO_RATIO_BAND.1);
        checks.push(c);
    }

    checks.push(GainDecomposition::compute(model, &batch)?.check());

    let c_max = batch
        .iter()
        .flat_map(|t| t.w_values.iter().copied())
        .fold(0.0, f64::max);
    let kl = kl_trajectory_bound(model, &batch, c_max.max(cfg.c_min - 0.5), cfg.c_min)?;
    checks.push(kl.check());

    if model.is_point_mass_model() {
        let threshold = support_threshold(cfg.cutoff);
        let mut unguided: Option<Estimate> = None;
        for &w in &cfg.support_weights {
            let report = if w > 0.0 {
                let s = GuidanceSchedule::constant(w)?;
                support_check(model, &simulate_batch(model, &s, cfg.class, &grid, &spec)?, threshold)?
            } else {
                support_check(model, &simulate_batch(model, &NoGuidance, cfg.class, &grid, &spec)?, threshold)?
            };
            let p = report.pass_fraction;
            checks.push(Check::lower(format!("support_fraction_w_{w}"), p.mean, 0.99, 0.0));
            match unguided {
                None if w == 0.0 => unguided = Some(p),
                Some(u) => {
                    let se = (u.stderr.powi(2) + p.stderr.powi(2)).sqrt().max(u.stderr);
                    checks.push(Check::lower(format!("support_guided_vs_unguided_w_{w}"), p.mean, u.mean, se));
                }
                None => {}
            }
        }
    } else {
        let cov = mass_coverage(model, &batch, 0.9999)?;
        checks.push(Check::lower("mass_coverage_q9999", cov.mean, 0.9999, cov.stderr).reported());
    }
    Ok(checks)
}

pub fn all_asserted_pass(checks: &[Check]) -> bool {
    checks.iter().filter(|c| c.asserted).all(|c| c.pass)
}

/// Noise with zero increments started from `state`; used by restart tests.
pub fn deterministic_noise(grid: &TimeGrid, state: &[f64]) -> PathNoise {
    PathNoise::zeros(grid, state.len()).with_initial(state.to_vec())
}
