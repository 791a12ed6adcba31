mod common;

use adaptive_guidance::{Component, MixtureModel};
use common::{fd_gradient, norm, quadrature_density, rel_err};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn log_marginal_matches_convolution_quadrature() {
    let m = MixtureModel::reference_mixture();
    let tau = 0.5;
    let x = [0.3, -0.2];
    let oracle = quadrature_density(&m, tau, x, 7.0, 400).ln();
    let value = m.log_marginal(tau, &x).unwrap();
    assert!((value - oracle).abs() < 1e-9, "{value} vs {oracle}");
}

#[test]
fn scores_match_finite_differences_at_random_points() {
    let m = MixtureModel::reference_mixture();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let tau = rng.random_range(0.05..5.0);
        let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let c = rng.random_range(0..4u32);
        let fd = fd_gradient(|y| m.log_marginal(tau, y).unwrap(), &x, 1e-5);
        worst = worst.max(rel_err(&m.score(tau, &x).unwrap(), &fd));
        let fd_c = fd_gradient(|y| m.log_conditional(tau, y, c).unwrap(), &x, 1e-5);
        worst = worst.max(rel_err(&m.cond_score(tau, &x, c).unwrap(), &fd_c));
    }
    assert!(worst < 1e-6, "max relative error {worst}");
}

#[test]
fn score_at_fixed_point_matches_finite_difference() {
    let m = MixtureModel::reference_mixture();
    let x = [1.1, 0.4];
    let fd = fd_gradient(|y| m.log_marginal(0.7, y).unwrap(), &x, 1e-5);
    assert!(rel_err(&m.score(0.7, &x).unwrap(), &fd) < 1e-6);
}

#[test]
fn guiding_field_hessian_matches_finite_differences_of_gradient() {
    let m = MixtureModel::reference_mixture();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..30 {
        let t = rng.random_range(0.5..4.9);
        let x = [rng.random_range(-2.5..2.5), rng.random_range(-2.5..2.5)];
        let c = rng.random_range(0..4u32);
        for j in 0..2 {
            let mut e = [0.0; 2];
            e[j] = 1.0;
            let col = m.hess_g_vp(t, &x, c, &e).unwrap();
            let mut p = x;
            let mut q = x;
            p[j] += 1e-4;
            q[j] -= 1e-4;
            let gp = m.grad_g(t, &p, c).unwrap();
            let gq = m.grad_g(t, &q, c).unwrap();
            let fd: Vec<f64> = gp.iter().zip(&gq).map(|(a, b)| (a - b) / 2e-4).collect();
            if norm(&fd) > 1e-6 {
                assert!(rel_err(&col, &fd) < 1e-5, "t={t} x={x:?} c={c}: {col:?} vs {fd:?}");
            }
        }
    }
}

#[test]
fn guiding_field_is_log_posterior_ratio_and_posteriors_sum_to_one() {
    let m = MixtureModel::reference_mixture();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let t = rng.random_range(0.0..4.99);
        let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
        let tau = m.forward_time(t);
        let mut total = 0.0;
        for c in 0..4 {
            let direct = m.log_conditional(tau, &x, c).unwrap() + (0.25f64).ln() - m.log_marginal(tau, &x).unwrap();
            let g = m.guiding_field(t, &x, c).unwrap();
            assert!((g + (0.25f64).ln() - direct).abs() < 1e-10);
            total += m.log_posterior(tau, &x, c).unwrap().exp();
        }
        assert!((total - 1.0).abs() < 1e-10);
    }
}

#[test]
fn origin_class_guiding_field_at_centre_matches_direct_posterior() {
    // The forward marginal at tau = 0.5 is an explicit four-Gaussian mixture.
    let m = MixtureModel::reference_mixture();
    let a = (-0.5f64).exp();
    let var = 0.5 * a * a + 1.0 - a * a;
    let lik = |mu: &[f64]| (-(mu[0] * mu[0] + mu[1] * mu[1]) * a * a / (2.0 * var)).exp();
    let comps = m.components();
    let post = lik(&comps[0].mean) / comps.iter().map(|c| lik(&c.mean)).sum::<f64>();
    let g = m.guiding_field(4.5, &[0.0, 0.0], 0).unwrap();
    assert!((g - (post.ln() - (0.25f64).ln())).abs() < 1e-12);
}

#[test]
fn guiding_field_bound_dominates_reference_mixture_samples() {
    let m = MixtureModel::reference_mixture();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for frac in [0.1, 0.5, 0.9] {
        let t = frac * m.horizon();
        let bound = m.grad_g_bound(t).unwrap();
        for _ in 0..10_000 {
            let x = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let c = rng.random_range(0..4u32);
            let g = m.grad_g(t, &x, c).unwrap();
            assert!(g[0] * g[0] + g[1] * g[1] <= bound, "t={t} x={x:?}");
        }
    }
}

#[test]
fn two_atom_bound_holds_on_a_line_sweep() {
    let m = MixtureModel::new(
        1,
        5.0,
        vec![
            Component { weight: 0.5, mean: vec![1.0], variance: 0.0, class: 0 },
            Component { weight: 0.5, mean: vec![-1.0], variance: 0.0, class: 1 },
        ],
    )
    .unwrap();
    for t in [0.5, 2.5, 4.0, 4.9, 4.99] {
        let bound = m.grad_g_bound(t).unwrap();
        let norms: Vec<f64> = (0..=4000)
            .map(|i| -3.0 + 6.0 * i as f64 / 4000.0)
            .map(|x: f64| m.grad_g(t, &[x], 0).unwrap()[0].abs())
            .collect();
        let gmax = norms.iter().cloned().fold(0.0, f64::max);
        // the bound is attained on the far side of the other atom, so allow rounding
        assert!(gmax * gmax <= bound * (1.0 + 1e-12), "t={t}: {} > {bound}", gmax * gmax);
        if t >= 4.9 {
            assert!(gmax * gmax > 0.99 * bound);
        }
    }
}
