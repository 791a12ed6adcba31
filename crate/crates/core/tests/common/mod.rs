//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use adaptive_guidance::adjoint::{adjoint_backward, batch_param_gradient, reward_estimate, AdjointOptions};
use adaptive_guidance::model::ClassLabel;
use adaptive_guidance::sde::{simulate, simulate_batch, BatchSpec};
use adaptive_guidance::{GuidanceSchedule, Method, MixtureModel, PathNoise, TimeGrid};

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b)
}

/// Density of the forward marginal at `x` by brute-force 2-D quadrature of
/// `p_0(z) N(x; a z, (1 - a^2) I)` over a square of `n x n` midpoints.
pub fn quadrature_density(model: &MixtureModel, tau: f64, x: [f64; 2], half_width: f64, n: usize) -> f64 {
    let a = (-tau).exp();
    let kv = 1.0 - a * a;
    let h = 2.0 * half_width / n as f64;
    let gauss = |d2: f64, v: f64| (-d2 / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v);
    let mut total = 0.0;
    for i in 0..n {
        let z1 = -half_width + (i as f64 + 0.5) * h;
        for j in 0..n {
            let z2 = -half_width + (j as f64 + 0.5) * h;
            let p0: f64 = model
                .components()
                .iter()
                .map(|c| c.weight * gauss((z1 - c.mean[0]).powi(2) + (z2 - c.mean[1]).powi(2), c.variance))
                .sum();
            total += p0 * gauss((x[0] - a * z1).powi(2) + (x[1] - a * z2).powi(2), kv);
        }
    }
    total * h * h
}

/// Central differences of a scalar field.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Hessian-vector product assembled from explicit Hessian matrices.
fn hessian_matrix(d: usize, hvp: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    (0..d)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            hvp(&e)
        })
        .collect()
}

fn mat_vec(cols: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let mut out = vec![0.0; d];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..d {
            out[i] += col[i] * v[j];
        }
    }
    out
}

/// Largest relative mismatch, over start nodes `k`, between `<lambda_k, Z_k>`
/// and the discrete integration-by-parts sum `sum_{j>=k} dt_j <B_j, Z_j>`,
/// where `Z` is propagated forward with explicitly assembled Jacobians
/// `Id + dt_j A_j` from `Z_k = 2 grad G_k`. Euler integration.
pub fn duality_max_rel_error(model: &MixtureModel, class: ClassLabel, nodes: usize, w: f64, alpha: f64, seed: u64) -> f64 {
    let d = model.dim();
    let grid = TimeGrid::uniform(model.horizon(), nodes, 0.01).unwrap();
    let schedule = GuidanceSchedule::constant(w).unwrap();
    let noise = PathNoise::for_path(seed, 0, false, &grid, d);
    let traj = simulate(model, &schedule, class, &grid, &noise, Method::Euler).unwrap();
    let rec = adjoint_backward(model, &traj, alpha, &AdjointOptions::default()).unwrap();
    let t = grid.nodes();
    let n = grid.len();
    let mut jac = Vec::new();
    let mut src = Vec::new();
    for (j, &tj) in t.iter().enumerate() {
        let y = traj.state(j);
        let tau = model.forward_time(tj);
        let wj = traj.w_values[j];
        let hc = hessian_matrix(d, |v| model.hess_log_cond_vp(tau, y, class, v).unwrap());
        let hg = hessian_matrix(d, |v| model.hess_g_vp(tj, y, class, v).unwrap());
        let a: Vec<Vec<f64>> = (0..d)
            .map(|c| (0..d).map(|r| if r == c { 1.0 } else { 0.0 } + 2.0 * hc[c][r] + 2.0 * wj * hg[c][r]).collect())
            .collect();
        jac.push(a);
        let gg = model.grad_g(t[j], y, class).unwrap();
        let coeff = 2.0 * (1.0 + 2.0 * wj - alpha * wj * wj);
        src.push(mat_vec(&hg, &gg).iter().map(|v| coeff * v).collect::<Vec<f64>>());
    }
    let mut worst: f64 = 0.0;
    for k in 0..n - 1 {
        let mut z: Vec<f64> = traj.grad_g(k).iter().map(|v| 2.0 * v).collect();
        let pairing: f64 = rec.lambda(k).iter().zip(&z).map(|(a, b)| a * b).sum();
        let mut total = 0.0;
        for j in k..n - 1 {
            let dt = grid.dt(j);
            total += dt * src[j].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
            let az = mat_vec(&jac[j], &z);
            for i in 0..d {
                z[i] += dt * az[i];
            }
        }
        if pairing != 0.0 || total != 0.0 {
            worst = worst.max((pairing - total).abs() / pairing.abs().max(total.abs()));
        }
    }
    worst
}

/// Adjoint gradient against central differences of the batch reward on
/// frozen noise; returns `(adjoint, finite differences)`.
pub fn gradient_pair(
    model: &MixtureModel,
    schedule: &GuidanceSchedule,
    class: ClassLabel,
    grid: &TimeGrid,
    spec: &BatchSpec,
    alpha: f64,
    step: f64,
) -> (Vec<f64>, Vec<f64>) {
    let batch = simulate_batch(model, schedule, class, grid, spec).unwrap();
    let (adj, _) = batch_param_gradient(model, schedule, &batch, alpha, &AdjointOptions::default()).unwrap();
    let reward = |s: &GuidanceSchedule| reward_estimate(&simulate_batch(model, s, class, grid, spec).unwrap(), alpha, spec.antithetic).mean;
    let fd = (0..schedule.num_params())
        .map(|i| {
            let mut plus = schedule.clone();
            plus.raw_params[i] += step;
            let mut minus = schedule.clone();
            minus.raw_params[i] -= step;
            (reward(&plus) - reward(&minus)) / (2.0 * step)
        })
        .collect();
    (adj, fd)
}

/// A table schedule with deterministic, varied parameters around `1/alpha`.
pub fn varied_table(grid: &TimeGrid, alpha: f64) -> GuidanceSchedule {
    let mut s = GuidanceSchedule::table(grid.nodes(), 1.0 / alpha).unwrap();
    for (i, p) in s.raw_params.iter_mut().enumerate() {
        *p += 0.3 * ((i as f64) * 0.7).sin();
    }
    s
}

/// Two point masses at `+-e_1` in `d = 2`, one per class.
pub fn two_atom_model() -> MixtureModel {
    MixtureModel::from_json_str(
        r#"{"dim": 2, "T": 5.0, "components": [
            {"weight": 0.5, "mean": [1.0, 0.0], "variance": 0.0, "class": 0},
            {"weight": 0.5, "mean": [-1.0, 0.0], "variance": 0.0, "class": 1}]}"#,
    )
    .unwrap()
}

/// Reference mixture with every component relabelled into one class.
pub fn uninformative_model() -> MixtureModel {
    let mut comps = MixtureModel::reference_mixture().components().to_vec();
    for c in &mut comps {
        c.class = 0;
    }
    MixtureModel::new(2, 5.0, comps).unwrap()
}
