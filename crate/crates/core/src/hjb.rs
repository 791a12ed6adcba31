//! Finite-difference solution of the HJB equation for the optimal guidance
//! field on a 2-D box.
//!
//! In backward time the value function satisfies
//!
//! ```text
//! -dV/dt = sup_w [ (1 + 2w - alpha w^2) |grad G|^2 + <b_w, grad V> ] + Lap V,
//! b_w(x) = x + 2 grad log p_{T-t}(x|c) + 2 w grad G_t(x),     V_T = 0,
//! ```
//!
//! whose pointwise maximizer is
//! `w* = (<grad G, grad V> + |grad G|^2) / (alpha |grad G|^2)`.
//!
//! The solver marches explicitly from `t = T` to `t = 0`. The Laplacian uses
//! the five-point stencil, the advection term is upwinded per coordinate from
//! the sign of `b_w`, and the supremum is taken exactly over the *discrete*
//! Hamiltonian: the upwind choice is piecewise constant in `w`, so the
//! Hamiltonian is a concave quadratic on each piece between the sign changes
//! of the drift components and is maximized piece by piece. Every step obeys
//! `dt (2 dim / h^2 + sum_i |b_i| / h) <= 0.9` for both the maximizing drift
//! and the unguided drift. That keeps the scheme monotone, and in particular
//! `V >= 0`. Boundaries are homogeneous Neumann via mirrored ghost nodes.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::reward_estimate;
use crate::error::{invalid, Error, Result};
use crate::io::fmt_f64;
use crate::model::{ClassLabel, MixtureModel};
use crate::schedule::GuidancePolicy;
use crate::sde::{simulate_batch, BatchSpec, TimeGrid, Trajectory};
use crate::stats::Estimate;

pub const COURANT_TARGET: f64 = 0.9;
pub const DEFAULT_TOL_G: f64 = 1e-12;
/// Backward times of the exported panels.
pub const FIGURE_TIMES: [f64; 6] = [0.0, 0.1, 0.5, 1.0, 2.5, 5.0];

/// Square grid `[-L, L]^2` with spacing `h`; node `(i, j)` sits at
/// `(-L + i h, -L + j h)` and is stored at `j * n + i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpatialGrid {
    pub half_width: f64,
    pub h: f64,
    pub n: usize,
}

impl SpatialGrid {
    pub fn new(half_width: f64, h: f64) -> Result<Self> {
        if !(half_width > 0.0 && h > 0.0 && h < half_width) {
            return invalid("need 0 < h < L");
        }
        let cells = 2.0 * half_width / h;
        let n_cells = cells.round();
        if (cells - n_cells).abs() > 1e-9 * cells {
            return invalid(format!("2L / h = {cells} is not an integer"));
        }
        Ok(Self {
            half_width,
            h,
            n: n_cells as usize + 1,
        })
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.h
    }

    pub fn point(&self, idx: usize) -> [f64; 2] {
        [self.coord(idx % self.n), self.coord(idx / self.n)]
    }

    /// Largest time step the explicit Laplacian tolerates.
    pub fn diffusion_limit(&self) -> f64 {
        COURANT_TARGET * self.h * self.h / 4.0
    }

    /// Neighbor values `(left, right, down, up)` with mirrored ghosts.
    #[inline]
    fn neighbors(&self, v: &[f64], i: usize, j: usize) -> (f64, f64, f64, f64) {
        let n = self.n;
        let at = |i: usize, j: usize| v[j * n + i];
        let l = if i == 0 { at(1, j) } else { at(i - 1, j) };
        let r = if i == n - 1 { at(n - 2, j) } else { at(i + 1, j) };
        let d = if j == 0 { at(i, 1) } else { at(i, j - 1) };
        let u = if j == n - 1 { at(i, n - 2) } else { at(i, j + 1) };
        (l, r, d, u)
    }

    /// Central-difference gradient (zero normal component on the boundary).
    pub fn gradient(&self, v: &[f64], idx: usize) -> [f64; 2] {
        let (i, j) = (idx % self.n, idx / self.n);
        let (l, r, d, u) = self.neighbors(v, i, j);
        [(r - l) / (2.0 * self.h), (u - d) / (2.0 * self.h)]
    }

    /// Bilinear interpolation of a nodal field, clamping `x` to the box.
    pub fn interpolate(&self, field: &[f64], x: &[f64]) -> f64 {
        let n = self.n;
        let locate = |c: f64| {
            let s = ((c + self.half_width) / self.h).clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            (i, s - i as f64)
        };
        let (i, fx) = locate(x[0]);
        let (j, fy) = locate(x[1]);
        let f = |i: usize, j: usize| field[j * n + i];
        (1.0 - fy) * ((1.0 - fx) * f(i, j) + fx * f(i + 1, j)) + fy * ((1.0 - fx) * f(i, j + 1) + fx * f(i + 1, j + 1))
    }
}

/// Result of maximizing the discrete Hamiltonian at one node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeUpdate {
    /// `sup_w` of the discrete Hamiltonian, Laplacian included.
    pub hamiltonian: f64,
    pub w: f64,
    /// `sum_i |b_i|` at the maximizer and at `w = 0`, whichever is larger.
    pub speed: f64,
}

/// Maximizes `(1 + 2w - alpha w^2)|g|^2 + sum_i upwind(b0_i + 2 w g_i)` over
/// real `w`, given forward and backward differences of `V`.
pub fn maximize_hamiltonian(b0: [f64; 2], g: [f64; 2], d_plus: [f64; 2], d_minus: [f64; 2], alpha: f64, laplacian: f64) -> NodeUpdate {
    let g2 = g[0] * g[0] + g[1] * g[1];
    let eval = |w: f64| {
        let mut adv = 0.0;
        for i in 0..2 {
            let b = b0[i] + 2.0 * w * g[i];
            adv += if b > 0.0 { b * d_plus[i] } else { b * d_minus[i] };
        }
        (1.0 + 2.0 * w - alpha * w * w) * g2 + adv
    };
    let speed0 = b0[0].abs() + b0[1].abs();
    if g2 == 0.0 {
        let w = 1.0 / alpha;
        return NodeUpdate {
            hamiltonian: eval(w) + laplacian,
            w,
            speed: speed0,
        };
    }
    let mut edges = [f64::NEG_INFINITY, f64::INFINITY, f64::INFINITY, f64::INFINITY];
    let mut count = 1;
    for i in 0..2 {
        if g[i] != 0.0 {
            edges[count] = -b0[i] / (2.0 * g[i]);
            count += 1;
        }
    }
    edges[1..count].sort_by(f64::total_cmp);
    let edges = &edges[..count + 1];
    let mut best = (f64::NEG_INFINITY, 0.0);
    for piece in edges.windows(2) {
        let (lo, hi) = (piece[0], piece[1]);
        let probe = match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo + 1.0,
            (false, true) => hi - 1.0,
            (false, false) => 0.0,
        };
        let mut beta = 2.0 * g2;
        for i in 0..2 {
            let b = b0[i] + 2.0 * probe * g[i];
            beta += 2.0 * g[i] * if b > 0.0 { d_plus[i] } else { d_minus[i] };
        }
        let w = (beta / (2.0 * alpha * g2)).clamp(lo, hi);
        let value = eval(w);
        if value > best.0 {
            best = (value, w);
        }
    }
    let w = best.1;
    let speed = speed0.max((b0[0] + 2.0 * w * g[0]).abs() + (b0[1] + 2.0 * w * g[1]).abs());
    NodeUpdate {
        hamiltonian: best.0 + laplacian,
        w,
        speed,
    }
}

/// Closed-form maximizer of `(1 + 2w - alpha w^2)|g|^2 + <b0 + 2 w g, p>`,
/// the Hamiltonian with a single (central) gradient `p`:
/// `w = (|g|^2 + <g, p>) / (alpha |g|^2)`.
pub fn maximize_hamiltonian_central(b0: [f64; 2], g: [f64; 2], p: [f64; 2], alpha: f64, laplacian: f64) -> NodeUpdate {
    let g2 = g[0] * g[0] + g[1] * g[1];
    let gp = g[0] * p[0] + g[1] * p[1];
    let w = if g2 == 0.0 { 1.0 / alpha } else { (g2 + gp) / (alpha * g2) };
    let hamiltonian = (1.0 + 2.0 * w - alpha * w * w) * g2 + b0[0] * p[0] + b0[1] * p[1] + 2.0 * w * gp + laplacian;
    let speed0 = b0[0].abs() + b0[1].abs();
    let speed = speed0.max((b0[0] + 2.0 * w * g[0]).abs() + (b0[1] + 2.0 * w * g[1]).abs());
    NodeUpdate { hamiltonian, w, speed }
}

/// Discretization of the advection term `<b, grad V>`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Advection {
    /// One-sided differences chosen by the sign of each drift component;
    /// monotone for any drift, first order in `h`.
    #[default]
    Upwind,
    /// Central differences; second order in `h`, monotone only while the
    /// cell Peclet number `|b_i| h / 2` stays at most 1.
    Central,
}

/// Drift ingredients at every node for one time level.
struct FieldCache {
    b0: Vec<[f64; 2]>,
    g: Vec<[f64; 2]>,
}

fn evaluate_fields(model: &MixtureModel, class: ClassLabel, space: &SpatialGrid, t_back: f64) -> FieldCache {
    let tau = model.forward_time(t_back).max(0.0);
    let rows: Vec<([f64; 2], [f64; 2])> = (0..space.len())
        .into_par_iter()
        .map(|idx| {
            let x = space.point(idx);
            let mut cs = [0.0; 2];
            let mut g = [0.0; 2];
            model.drift_terms(tau, &x, class, &mut cs, &mut g);
            ([x[0] + 2.0 * cs[0], x[1] + 2.0 * cs[1]], g)
        })
        .collect();
    let (b0, g) = rows.into_iter().unzip();
    FieldCache { b0, g }
}

/// Hamiltonian and maximizing weight at every node.
fn hamiltonian_field(space: &SpatialGrid, v: &[f64], fields: &FieldCache, alpha: f64, advection: Advection) -> Vec<NodeUpdate> {
    let h = space.h;
    (0..space.len())
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx % space.n, idx / space.n);
            let c = v[idx];
            let (l, r, d, u) = space.neighbors(v, i, j);
            let lap = (l + r + d + u - 4.0 * c) / (h * h);
            if advection == Advection::Central {
                let p = [(r - l) / (2.0 * h), (u - d) / (2.0 * h)];
                return maximize_hamiltonian_central(fields.b0[idx], fields.g[idx], p, alpha, lap);
            }
            maximize_hamiltonian(
                fields.b0[idx],
                fields.g[idx],
                [(r - c) / h, (u - c) / h],
                [(c - l) / h, (c - d) / h],
                alpha,
                lap,
            )
        })
        .collect()
}

/// One explicit backward step from `t_back` of length `dt`, no step control.
pub fn backward_step(
    model: &MixtureModel,
    class: ClassLabel,
    space: &SpatialGrid,
    alpha: f64,
    t_back: f64,
    v: &[f64],
    dt: f64,
) -> Vec<f64> {
    let fields = evaluate_fields(model, class, space, t_back);
    let updates = hamiltonian_field(space, v, &fields, alpha, Advection::Upwind);
    v.iter().zip(&updates).map(|(vi, u)| vi + dt * u.hamiltonian).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct HjbConfig {
    pub class: ClassLabel,
    pub alpha: f64,
    pub half_width: f64,
    pub h: f64,
    /// Upper bound on the time step; the solver may take smaller steps.
    pub dt_max: Option<f64>,
    /// Stored slices, backward clock. The terminal slice is always stored.
    pub slice_times: Vec<f64>,
    pub tol_g: f64,
    pub advection: Advection,
}

impl HjbConfig {
    pub fn new(class: ClassLabel, alpha: f64, half_width: f64, h: f64) -> Self {
        Self {
            class,
            alpha,
            half_width,
            h,
            dt_max: None,
            slice_times: Vec::new(),
            tol_g: DEFAULT_TOL_G,
            advection: Advection::Upwind,
        }
    }

    /// Stores `count + 1` evenly spaced slices on `[0, T]` plus the panels.
    pub fn with_uniform_slices(mut self, horizon: f64, count: usize) -> Self {
        self.slice_times = (0..=count).map(|k| horizon * k as f64 / count as f64).collect();
        self.slice_times.extend(FIGURE_TIMES.iter().filter(|t| **t <= horizon));
        self
    }
}

/// `V` and `w*` at one stored time.
#[derive(Clone, Debug)]
pub struct Slice {
    pub t_back: f64,
    pub tau: f64,
    pub values: Vec<f64>,
    pub w_star: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ValueGrid {
    pub space: SpatialGrid,
    pub class: ClassLabel,
    pub alpha: f64,
    pub horizon: f64,
    pub tol_g: f64,
    /// Increasing backward time.
    pub slices: Vec<Slice>,
    pub steps: usize,
    pub max_courant: f64,
    pub min_dt: f64,
    pub max_dt: f64,
}

/// Solves from `V_T = 0` back to `t = 0`.
pub fn solve_hjb(model: &MixtureModel, cfg: &HjbConfig) -> Result<ValueGrid> {
    if model.dim() != 2 {
        return invalid("the HJB solver is two-dimensional");
    }
    if !(cfg.alpha > 0.0) {
        return invalid("alpha must be positive");
    }
    model.class_prior(cfg.class)?;
    if model.has_point_masses() {
        return invalid("the HJB solve reaches forward time 0, where point masses are undefined");
    }
    let space = SpatialGrid::new(cfg.half_width, cfg.h)?;
    let diffusion_limit = space.diffusion_limit();
    let dt_cap = match cfg.dt_max {
        Some(dt) if dt > diffusion_limit => {
            return invalid(format!(
                "time step {dt} violates the diffusion limit {diffusion_limit} = 0.9 h^2 / (2 dim)"
            ))
        }
        Some(dt) if !(dt > 0.0) => return invalid("time step must be positive"),
        Some(dt) => dt,
        None => diffusion_limit,
    };
    let reach = model
        .components()
        .iter()
        .map(|c| c.mean.iter().map(|m| m * m).sum::<f64>().sqrt() + 4.0 * c.variance.sqrt().max(1.0))
        .fold(0.0, f64::max);
    if reach > cfg.half_width {
        log::warn!("box half-width {} is smaller than the 4-sigma reach {reach:.3}", cfg.half_width);
    }

    let horizon = model.horizon();
    let mut stops: Vec<f64> = cfg.slice_times.iter().copied().filter(|t| (0.0..=horizon).contains(t)).collect();
    stops.push(horizon);
    stops.push(0.0);
    stops.sort_by(|a, b| b.total_cmp(a));
    stops.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let n = space.len();
    let mut v = vec![0.0; n];
    let mut t = horizon;
    let mut slices = Vec::new();
    let mut steps = 0;
    let mut max_courant: f64 = 0.0;
    let (mut min_dt, mut max_dt) = (f64::INFINITY, 0.0_f64);
    let stiffness = 4.0 / (space.h * space.h);
    let mut peclet_warned = false;
    for &stop in &stops {
        while t > stop + 1e-12 {
            let fields = evaluate_fields(model, cfg.class, &space, t);
            let updates = hamiltonian_field(&space, &v, &fields, cfg.alpha, cfg.advection);
            let speed = updates.iter().map(|u| u.speed).fold(0.0, f64::max);
            if cfg.advection == Advection::Central && speed * space.h > 2.0 && !peclet_warned {
                log::warn!("cell Peclet number above 1 at t = {t}; central advection is not monotone here");
                peclet_warned = true;
            }
            let cfl = COURANT_TARGET / (stiffness + speed / space.h);
            let mut dt = dt_cap.min(cfl);
            if t - dt < stop + 1e-12 {
                dt = t - stop;
            }
            for (vi, u) in v.iter_mut().zip(&updates) {
                *vi += dt * u.hamiltonian;
            }
            t = if (t - dt - stop).abs() < 1e-12 { stop } else { t - dt };
            steps += 1;
            max_courant = max_courant.max(dt * (stiffness + speed / space.h));
            min_dt = min_dt.min(dt);
            max_dt = max_dt.max(dt);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    step: steps,
                    detail: format!("non-finite value slice at t = {t}"),
                });
            }
        }
        let w_star = extract_w_star(model, cfg.class, &space, cfg.alpha, cfg.tol_g, t, &v);
        slices.push(Slice {
            t_back: stop,
            tau: model.forward_time(stop),
            values: v.clone(),
            w_star,
        });
    }
    slices.reverse();
    Ok(ValueGrid {
        space,
        class: cfg.class,
        alpha: cfg.alpha,
        horizon,
        tol_g: cfg.tol_g,
        slices,
        steps,
        max_courant,
        min_dt,
        max_dt,
    })
}

/// `w* = 1/alpha + <grad G, grad V> / (alpha |grad G|^2)`, with central
/// differences for `grad V`, and `1/alpha` where `|grad G|^2 < tol_g`.
pub fn extract_w_star(
    model: &MixtureModel,
    class: ClassLabel,
    space: &SpatialGrid,
    alpha: f64,
    tol_g: f64,
    t_back: f64,
    v: &[f64],
) -> Vec<f64> {
    let fields = evaluate_fields(model, class, space, t_back);
    (0..space.len())
        .into_par_iter()
        .map(|idx| {
            let g = fields.g[idx];
            let g2 = g[0] * g[0] + g[1] * g[1];
            if g2 < tol_g {
                return 1.0 / alpha;
            }
            let dv = space.gradient(v, idx);
            1.0 / alpha + (g[0] * dv[0] + g[1] * dv[1]) / (alpha * g2)
        })
        .collect()
}

impl ValueGrid {
    /// Stored slice closest in time; ties go to the earlier slice.
    pub fn nearest_slice(&self, t_back: f64) -> &Slice {
        let mut best = &self.slices[0];
        for s in &self.slices[1..] {
            if (s.t_back - t_back).abs() < (best.t_back - t_back).abs() {
                best = s;
            }
        }
        best
    }

    pub fn slice_at(&self, t_back: f64) -> Option<&Slice> {
        self.slices.iter().find(|s| (s.t_back - t_back).abs() < 1e-9)
    }

    /// Policy replaying `w*` through the sampler.
    pub fn policy(&self) -> HjbPolicy<'_> {
        HjbPolicy { grid: self }
    }

    pub fn write_slice_csv<W: Write>(&self, slice: &Slice, mut out: W) -> Result<()> {
        writeln!(out, "x1,x2,V,w_star")?;
        for idx in 0..self.space.len() {
            let p = self.space.point(idx);
            writeln!(
                out,
                "{},{},{},{}",
                fmt_f64(p[0]),
                fmt_f64(p[1]),
                fmt_f64(slice.values[idx]),
                fmt_f64(slice.w_star[idx])
            )?;
        }
        Ok(())
    }

    /// Largest `|V(x1, x2) - V(-x1, x2)|` over all slices.
    pub fn mirror_asymmetry(&self) -> f64 {
        let n = self.space.n;
        let mut worst: f64 = 0.0;
        for s in &self.slices {
            for j in 0..n {
                for i in 0..n {
                    worst = worst.max((s.values[j * n + i] - s.values[j * n + (n - 1 - i)]).abs());
                }
            }
        }
        worst
    }
}

/// Spatial statistics of one `w*` slice over the high-density region of the
/// conditional law.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SliceStats {
    pub t_back: f64,
    pub mean: f64,
    pub std: f64,
    pub coefficient_of_variation: f64,
    pub nodes: usize,
}

/// Nodes where `p_{T-t}(x|c)` is at least `fraction` of its grid maximum.
pub fn high_density_mask(model: &MixtureModel, class: ClassLabel, space: &SpatialGrid, t_back: f64, fraction: f64) -> Result<Vec<bool>> {
    let tau = model.forward_time(t_back);
    let logs: Vec<f64> = (0..space.len())
        .map(|idx| model.log_conditional(tau, &space.point(idx), class))
        .collect::<Result<_>>()?;
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(logs.iter().map(|l| *l >= max + fraction.ln()).collect())
}

pub fn slice_stats(model: &MixtureModel, grid: &ValueGrid, slice: &Slice, fraction: f64) -> Result<SliceStats> {
    let mask = high_density_mask(model, grid.class, &grid.space, slice.t_back, fraction)?;
    let vals: Vec<f64> = slice.w_star.iter().zip(&mask).filter(|(_, m)| **m).map(|(w, _)| *w).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(SliceStats {
        t_back: slice.t_back,
        mean,
        std,
        coefficient_of_variation: std / mean.abs(),
        nodes: vals.len(),
    })
}

/// `w*(t, x)` looked up from the nearest stored slice by bilinear
/// interpolation. The state is clamped to the box for the lookup only.
#[derive(Clone, Copy, Debug)]
pub struct HjbPolicy<'a> {
    grid: &'a ValueGrid,
}

impl GuidancePolicy for HjbPolicy<'_> {
    fn weight(&self, t_back: f64, x: &[f64], class: ClassLabel) -> Result<f64> {
        if class != self.grid.class {
            return invalid(format!("policy was solved for class {}, asked for {class}", self.grid.class));
        }
        let s = self.grid.nearest_slice(t_back);
        Ok(self.grid.space.interpolate(&s.w_star, x))
    }
}

/// Reward of the sampler driven by `w*`.
pub fn policy_rollout(model: &MixtureModel, grid: &ValueGrid, time: &TimeGrid, spec: &BatchSpec) -> Result<(Estimate, Vec<Trajectory>)> {
    let batch = simulate_batch(model, &grid.policy(), grid.class, time, spec)?;
    Ok((reward_estimate(&batch, grid.alpha, spec.antithetic), batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn uninformative() -> MixtureModel {
        let mut comps = MixtureModel::reference_mixture().components().to_vec();
        for c in &mut comps {
            c.class = 0;
        }
        MixtureModel::new(2, 5.0, comps).unwrap()
    }

    #[test]
    fn spatial_grid_layout() {
        let s = SpatialGrid::new(1.0, 0.5).unwrap();
        assert_eq!(s.n, 5);
        assert_eq!(s.point(0), [-1.0, -1.0]);
        assert_eq!(s.point(6), [-0.5, -0.5]);
        assert!(SpatialGrid::new(1.0, 0.3).is_err());
        let field: Vec<f64> = (0..s.len()).map(|i| {
            let p = s.point(i);
            2.0 * p[0] - p[1] + 0.5
        }).collect();
        assert_relative_eq!(s.interpolate(&field, &[0.2, -0.3]), 0.4 + 0.3 + 0.5, epsilon = 1e-12);
        // clamped lookup
        assert_relative_eq!(s.interpolate(&field, &[5.0, 0.0]), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn discrete_maximizer_agrees_with_brute_force() {
        let cases = [
            ([0.3, -0.7], [0.4, 0.1], [0.2, -0.5], [0.1, 0.3], 2.0),
            ([-1.0, 0.2], [0.05, -0.3], [1.0, 0.4], [-0.2, 0.6], 10.0),
            ([0.0, 0.0], [1e-3, 2e-3], [3.0, -1.0], [2.0, 1.0], 5.0),
        ];
        for (b0, g, dp, dm, alpha) in cases {
            let u = maximize_hamiltonian(b0, g, dp, dm, alpha, 0.0);
            let g2: f64 = g[0] * g[0] + g[1] * g[1];
            let eval = |w: f64| {
                let mut adv = 0.0;
                for i in 0..2 {
                    let b = b0[i] + 2.0 * w * g[i];
                    adv += if b > 0.0 { b * dp[i] } else { b * dm[i] };
                }
                (1.0 + 2.0 * w - alpha * w * w) * g2 + adv
            };
            let brute = (-200_000..=200_000).map(|k| eval(k as f64 * 1e-3)).fold(f64::NEG_INFINITY, f64::max);
            assert!(u.hamiltonian >= brute - 1e-12);
            assert_relative_eq!(u.hamiltonian, eval(u.w), epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_gradient_of_value_gives_one_over_alpha() {
        let u = maximize_hamiltonian([0.5, -0.2], [0.3, 0.4], [0.0; 2], [0.0; 2], 4.0, 0.0);
        assert_relative_eq!(u.w, 0.25, epsilon = 1e-15);
        assert_relative_eq!(u.hamiltonian, 1.25 * 0.25, epsilon = 1e-15);
    }

    #[test]
    fn uninformative_value_is_zero_and_control_is_one_over_alpha() {
        let m = uninformative();
        let cfg = HjbConfig::new(0, 10.0, 4.0, 0.5).with_uniform_slices(5.0, 5);
        let vg = solve_hjb(&m, &cfg).unwrap();
        for s in &vg.slices {
            assert!(s.values.iter().all(|v| *v == 0.0));
            assert!(s.w_star.iter().all(|w| *w == 0.1));
        }
    }

    #[test]
    fn terminal_slice_and_one_step() {
        let m = MixtureModel::reference_mixture();
        let alpha = 10.0;
        let space = SpatialGrid::new(4.0, 0.25).unwrap();
        let v0 = vec![0.0; space.len()];
        let w = extract_w_star(&m, 0, &space, alpha, DEFAULT_TOL_G, 5.0, &v0);
        assert!(w.iter().all(|x| *x == 1.0 / alpha));
        let dt = 1e-3;
        let v1 = backward_step(&m, 0, &space, alpha, 5.0, &v0, dt);
        for idx in (0..space.len()).step_by(37) {
            let g2: f64 = m.grad_g(5.0, &space.point(idx), 0).unwrap().iter().map(|x| x * x).sum();
            assert!((v1[idx] - dt * (1.0 + 1.0 / alpha) * g2).abs() <= 1e-10);
        }
    }

    #[test]
    fn coarse_solve_is_nonnegative_finite_and_symmetric() {
        let m = MixtureModel::reference_mixture();
        let cfg = HjbConfig::new(0, 5.0, 4.0, 0.25).with_uniform_slices(5.0, 10);
        let vg = solve_hjb(&m, &cfg).unwrap();
        assert!(vg.max_courant <= COURANT_TARGET + 1e-12);
        for s in &vg.slices {
            assert!(s.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        assert!(vg.mirror_asymmetry() < 1e-10);
        assert!(vg.slice_at(5.0).unwrap().values.iter().all(|v| *v == 0.0));
        assert_eq!(vg.slices.first().unwrap().t_back, 0.0);
    }

    #[test]
    fn explicit_step_above_diffusion_limit_is_rejected() {
        let m = MixtureModel::reference_mixture();
        let mut cfg = HjbConfig::new(0, 5.0, 4.0, 0.25);
        cfg.dt_max = Some(1.0);
        assert!(matches!(solve_hjb(&m, &cfg), Err(Error::InvalidInput(_))));
    }
}
