//! Time grids and integration of the guided reverse SDE
//!
//! ```text
//! dY = [Y + 2 grad log p_{T-t}(Y|c) + 2 w grad G_t(Y)] dt + sqrt(2) dB,  Y_0 ~ N(0, I)
//! ```
//!
//! Noise is explicit: every path owns a [`PathNoise`] (initial draw plus
//! Brownian increments), so a trajectory is a pure function of its inputs.
//! Batches derive per-path noise from a base seed with a counter scheme:
//! path `i` uses a ChaCha8 generator seeded with the base seed on stream
//! `i` (or stream `i / 2` for antithetic pairs, the odd member negating
//! every draw). Serial and parallel runs therefore agree bit-for-bit.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::fmt_f64;
use crate::linalg::{all_finite, norm_sq};
use crate::model::{ClassLabel, MixtureModel};
use crate::schedule::GuidancePolicy;

pub const DEFAULT_CUTOFF: f64 = 0.01;

/// Sampler time nodes `0 = t_0 < ... < t_N = T - cutoff` (backward clock).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    cutoff: f64,
    nodes: Vec<f64>,
}

impl TimeGrid {
    /// `n_nodes` uniform nodes on `[0, horizon - cutoff]`.
    pub fn uniform(horizon: f64, n_nodes: usize, cutoff: f64) -> Result<Self> {
        if !(cutoff > 0.0 && horizon > cutoff && horizon.is_finite()) {
            return invalid(format!(
                "need T > cutoff > 0, got T = {horizon}, cutoff = {cutoff}"
            ));
        }
        if n_nodes < 2 {
            return invalid("a time grid needs at least two nodes");
        }
        let end = horizon - cutoff;
        let spacing = end / (n_nodes - 1) as f64;
        if !(spacing > 0.0) {
            return invalid("nonpositive grid spacing");
        }
        let mut nodes: Vec<f64> = (0..n_nodes).map(|k| k as f64 * spacing).collect();
        nodes[n_nodes - 1] = end;
        Ok(Self { horizon, cutoff, nodes })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    /// Nodes from index `k` on; used to restart paths from an interior state.
    pub fn tail(&self, k: usize) -> Result<Self> {
        if k + 2 > self.nodes.len() {
            return invalid("tail grid would have fewer than two nodes");
        }
        Ok(Self {
            horizon: self.horizon,
            cutoff: self.cutoff,
            nodes: self.nodes[k..].to_vec(),
        })
    }

    /// Splits every interval into `factor` equal parts.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return invalid("refinement factor must be positive");
        }
        let mut nodes = Vec::with_capacity(self.steps() * factor + 1);
        for k in 0..self.steps() {
            let dt = self.dt(k) / factor as f64;
            for j in 0..factor {
                nodes.push(self.nodes[k] + j as f64 * dt);
            }
        }
        nodes.push(*self.nodes.last().unwrap());
        Ok(Self {
            horizon: self.horizon,
            cutoff: self.cutoff,
            nodes,
        })
    }

    /// Per-node trapezoidal weights.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let n = self.nodes.len();
        let mut w = vec![0.0; n];
        for k in 0..n - 1 {
            let h = 0.5 * self.dt(k);
            w[k] += h;
            w[k + 1] += h;
        }
        w
    }

    /// Per-node left-Riemann weights (last node weight zero).
    pub fn left_weights(&self) -> Vec<f64> {
        let n = self.nodes.len();
        let mut w: Vec<f64> = (0..n - 1).map(|k| self.dt(k)).collect();
        w.push(0.0);
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Euler,
    Heun,
}

impl Method {
    /// Path-integral weights consistent with the integrator: trapezoid for
    /// Heun, left Riemann for Euler.
    pub fn quadrature_weights(&self, grid: &TimeGrid) -> Vec<f64> {
        match self {
            Method::Euler => grid.left_weights(),
            Method::Heun => grid.trapezoid_weights(),
        }
    }
}

/// Initial Gaussian draw and Brownian increments of one path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathNoise {
    pub dim: usize,
    pub initial: Vec<f64>,
    /// `steps * dim` increments; row `k` has variance `dt_k` per coordinate.
    pub increments: Vec<f64>,
}

impl PathNoise {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, grid: &TimeGrid, dim: usize) -> Self {
        let initial = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut increments = Vec::with_capacity(grid.steps() * dim);
        for k in 0..grid.steps() {
            let sd = grid.dt(k).sqrt();
            for _ in 0..dim {
                increments.push(sd * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Self { dim, initial, increments }
    }

    /// Noise of path `path_index` in a batch seeded with `base_seed`.
    pub fn for_path(base_seed: u64, path_index: usize, antithetic: bool, grid: &TimeGrid, dim: usize) -> Self {
        let stream = if antithetic { path_index / 2 } else { path_index };
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(stream as u64);
        let noise = Self::sample(&mut rng, grid, dim);
        if antithetic && path_index % 2 == 1 {
            noise.negated()
        } else {
            noise
        }
    }

    pub fn zeros(grid: &TimeGrid, dim: usize) -> Self {
        Self {
            dim,
            initial: vec![0.0; dim],
            increments: vec![0.0; grid.steps() * dim],
        }
    }

    pub fn negated(&self) -> Self {
        Self {
            dim: self.dim,
            initial: self.initial.iter().map(|v| -v).collect(),
            increments: self.increments.iter().map(|v| -v).collect(),
        }
    }

    pub fn with_initial(mut self, initial: Vec<f64>) -> Self {
        self.initial = initial;
        self
    }

    pub fn steps(&self) -> usize {
        self.increments.len() / self.dim.max(1)
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    /// Sums consecutive groups of `factor` increments: the same Brownian path
    /// observed on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let steps = self.steps();
        if factor == 0 || !steps.is_multiple_of(factor) {
            return invalid(format!("cannot coarsen {steps} steps by {factor}"));
        }
        let d = self.dim;
        let mut increments = vec![0.0; steps / factor * d];
        for k in 0..steps {
            let dst = k / factor;
            for j in 0..d {
                increments[dst * d + j] += self.increments[k * d + j];
            }
        }
        Ok(Self {
            dim: d,
            initial: self.initial.clone(),
            increments,
        })
    }
}

/// One guided reverse path with its cached guidance quantities.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub class: ClassLabel,
    pub method: Method,
    pub dim: usize,
    /// `len(nodes) * dim`, row-major.
    pub states: Vec<f64>,
    pub noise: PathNoise,
    pub w_values: Vec<f64>,
    /// `grad G_{t_k}(Y_k)`, row-major.
    pub grad_g_values: Vec<f64>,
    /// Heun only: weight used at the predictor point of step `k`.
    pub predictor_w: Vec<f64>,
    /// `(base_seed, path_index)` when produced by [`simulate_batch`].
    pub seed: Option<(u64, usize)>,
}

impl Trajectory {
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn grad_g(&self, k: usize) -> &[f64] {
        &self.grad_g_values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.grid.len() - 1)
    }

    pub fn grad_g_norm_sq(&self, k: usize) -> f64 {
        norm_sq(self.grad_g(k))
    }

    /// Largest deviation between the cached `grad G` values and a fresh
    /// evaluation at the stored states.
    pub fn cache_deviation(&self, model: &MixtureModel) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (k, &t) in self.grid.nodes().iter().enumerate() {
            let fresh = model.grad_g(t, self.state(k), self.class)?;
            for (a, b) in fresh.iter().zip(self.grad_g(k)) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }
}

/// Scratch buffers for one drift evaluation.
struct DriftEval {
    cond_score: Vec<f64>,
    grad_g: Vec<f64>,
}

impl DriftEval {
    fn new(dim: usize) -> Self {
        Self {
            cond_score: vec![0.0; dim],
            grad_g: vec![0.0; dim],
        }
    }

    /// Fills the score buffers at backward time `t` and writes the drift for
    /// weight `w` into `out`.
    fn drift(&mut self, model: &MixtureModel, t: f64, y: &[f64], class: ClassLabel, w: f64, out: &mut [f64]) {
        model.drift_terms(model.forward_time(t).max(0.0), y, class, &mut self.cond_score, &mut self.grad_g);
        for k in 0..y.len() {
            out[k] = y[k] + 2.0 * self.cond_score[k] + 2.0 * w * self.grad_g[k];
        }
    }
}

fn divergence(step: usize, what: &str) -> Error {
    Error::Divergence {
        step,
        detail: format!("non-finite {what}"),
    }
}

/// Integrates one guided path on `grid` with explicit `noise`.
pub fn simulate<P: GuidancePolicy + ?Sized>(
    model: &MixtureModel,
    policy: &P,
    class: ClassLabel,
    grid: &TimeGrid,
    noise: &PathNoise,
    method: Method,
) -> Result<Trajectory> {
    let d = model.dim();
    model.class_prior(class)?;
    if (grid.horizon() - model.horizon()).abs() > 1e-12 {
        return invalid("time grid horizon differs from the model horizon");
    }
    if noise.dim != d || noise.initial.len() != d || noise.steps() != grid.steps() {
        return invalid("noise does not match the grid and model dimension");
    }
    if !all_finite(&noise.initial) {
        return Err(divergence(0, "initial state"));
    }
    let n = grid.len();
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut states = Vec::with_capacity(n * d);
    let mut w_values = Vec::with_capacity(n);
    let mut grad_g_values = Vec::with_capacity(n * d);
    let mut predictor_w = Vec::new();
    let mut eval = DriftEval::new(d);
    let mut drift = vec![0.0; d];
    let mut drift_pred = vec![0.0; d];
    let mut pred = vec![0.0; d];
    let mut y = noise.initial.clone();
    for k in 0..n {
        let t = grid.nodes()[k];
        let w = policy.weight(t, &y, class)?;
        if !w.is_finite() {
            return Err(divergence(k, "guidance weight"));
        }
        eval.drift(model, t, &y, class, w, &mut drift);
        if !all_finite(&drift) {
            return Err(divergence(k, "drift"));
        }
        states.extend_from_slice(&y);
        w_values.push(w);
        grad_g_values.extend_from_slice(&eval.grad_g);
        if k + 1 == n {
            break;
        }
        let dt = grid.dt(k);
        let db = noise.increment(k);
        match method {
            Method::Euler => {
                for j in 0..d {
                    y[j] += dt * drift[j] + sqrt2 * db[j];
                }
            }
            Method::Heun => {
                for j in 0..d {
                    pred[j] = y[j] + dt * drift[j] + sqrt2 * db[j];
                }
                if !all_finite(&pred) {
                    return Err(divergence(k + 1, "predictor state"));
                }
                let t_next = grid.nodes()[k + 1];
                let w_pred = policy.weight(t_next, &pred, class)?;
                eval.drift(model, t_next, &pred, class, w_pred, &mut drift_pred);
                predictor_w.push(w_pred);
                for j in 0..d {
                    y[j] += 0.5 * dt * (drift[j] + drift_pred[j]) + sqrt2 * db[j];
                }
            }
        }
        if !all_finite(&y) {
            return Err(divergence(k + 1, "state"));
        }
    }
    Ok(Trajectory {
        grid: grid.clone(),
        class,
        method,
        dim: d,
        states,
        noise: noise.clone(),
        w_values,
        grad_g_values,
        predictor_w,
        seed: None,
    })
}

/// How a batch of paths is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub n_paths: usize,
    pub antithetic: bool,
    pub base_seed: u64,
    pub method: Method,
}

impl BatchSpec {
    pub fn new(n_paths: usize, base_seed: u64) -> Self {
        Self {
            n_paths,
            antithetic: false,
            base_seed,
            method: Method::Heun,
        }
    }

    pub fn antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return invalid("batch needs at least one path");
        }
        if self.antithetic && !self.n_paths.is_multiple_of(2) {
            return invalid("antithetic batches need an even number of paths");
        }
        Ok(())
    }

    pub fn noise(&self, path_index: usize, grid: &TimeGrid, dim: usize) -> PathNoise {
        PathNoise::for_path(self.base_seed, path_index, self.antithetic, grid, dim)
    }
}

/// Simulates `spec.n_paths` paths in parallel; output order is path order.
pub fn simulate_batch<P: GuidancePolicy + ?Sized>(
    model: &MixtureModel,
    policy: &P,
    class: ClassLabel,
    grid: &TimeGrid,
    spec: &BatchSpec,
) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    (0..spec.n_paths)
        .into_par_iter()
        .map(|i| {
            let noise = spec.noise(i, grid, model.dim());
            let mut traj = simulate(model, policy, class, grid, &noise, spec.method)?;
            traj.seed = Some((spec.base_seed, i));
            Ok(traj)
        })
        .collect()
}

/// Writes `path_id,k,t_k,y_1..y_d,w_k,grad_g_norm_sq` rows.
pub fn write_trajectories_csv<W: Write>(mut out: W, batch: &[Trajectory]) -> Result<()> {
    let d = batch.first().map(|t| t.dim).unwrap_or(0);
    let ys: Vec<String> = (1..=d).map(|j| format!("y_{j}")).collect();
    writeln!(out, "path_id,k,t_k,{},w_k,grad_g_norm_sq", ys.join(","))?;
    for (p, traj) in batch.iter().enumerate() {
        let id = traj.seed.map(|s| s.1).unwrap_or(p);
        for (k, &t) in traj.grid.nodes().iter().enumerate() {
            let y: Vec<String> = traj.state(k).iter().map(|v| fmt_f64(*v)).collect();
            writeln!(
                out,
                "{id},{k},{},{},{},{}",
                fmt_f64(t),
                y.join(","),
                fmt_f64(traj.w_values[k]),
                fmt_f64(traj.grad_g_norm_sq(k))
            )?;
        }
    }
    Ok(())
}
