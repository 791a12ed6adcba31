//! Gradient ascent on the guidance reward.
//!
//! Each iteration simulates a batch per class under the current schedule,
//! runs the adjoint sweep on every path, pulls the weight gradients back to
//! the raw parameters, averages over classes, clips the global norm and takes
//! one SGD or Adam ascent step. Batch noise is seeded from
//! `(seed, iteration, class index)`, so a run is reproducible bit for bit.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{adjoint_backward, param_gradient, reward_estimate, AdjointOptions};
use crate::error::{invalid, Error, Result};
use crate::io::fmt_f64;
use crate::linalg::{axpy, norm};
use crate::model::{ClassLabel, MixtureModel};
use crate::schedule::GuidanceSchedule;
use crate::sde::{simulate_batch, BatchSpec, Method, TimeGrid};

pub const DEFAULT_CLIP_NORM: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub iterations: usize,
    pub paths_per_class: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub clip_norm: f64,
    pub seed: u64,
    pub method: Method,
    pub antithetic: bool,
    pub adjoint: AdjointOptions,
    /// Clips every `dR/dw_k` of a batch to this quantile of their absolute
    /// values. Off when `None`.
    pub quantile_clip: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iterations: 25,
            paths_per_class: 256,
            learning_rate: 0.1,
            optimizer: Optimizer::Adam,
            clip_norm: DEFAULT_CLIP_NORM,
            seed: 0,
            method: Method::Heun,
            antithetic: true,
            adjoint: AdjointOptions::default(),
            quantile_clip: None,
        }
    }
}

/// Statistics of one iteration, measured before its update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardReport {
    pub iteration: usize,
    pub mean_reward: f64,
    pub stderr: f64,
    /// Batch mean of `w_k` per node, over paths and classes.
    pub mean_w: Vec<f64>,
    /// Norm of the class-averaged gradient before clipping.
    pub grad_norm: f64,
    pub clip_events: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub schedule: GuidanceSchedule,
    pub history: Vec<RewardReport>,
    /// Set when a divergence stopped the run early.
    pub failure: Option<Error>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the batch for `class_index` at `iteration`.
pub fn batch_seed(seed: u64, iteration: usize, class_index: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ iteration as u64) ^ class_index as u64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        grad.iter()
            .enumerate()
            .map(|(i, g)| {
                self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
                self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
                (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

fn clip_quantile(values: &mut [Vec<f64>], q: f64) {
    let mut all: Vec<f64> = values.iter().flatten().map(|v| v.abs()).collect();
    if all.is_empty() {
        return;
    }
    all.sort_by(f64::total_cmp);
    let idx = ((all.len() - 1) as f64 * q).round() as usize;
    let bound = all[idx];
    for v in values.iter_mut().flatten() {
        *v = v.clamp(-bound, bound);
    }
}

struct ClassStep {
    reward: crate::stats::Estimate,
    grad: Vec<f64>,
    w_sum: Vec<f64>,
    clips: usize,
}

fn class_step(
    model: &MixtureModel,
    schedule: &GuidanceSchedule,
    class: ClassLabel,
    grid: &TimeGrid,
    alpha: f64,
    opts: &TrainOptions,
    seed: u64,
) -> Result<ClassStep> {
    let spec = BatchSpec::new(opts.paths_per_class, seed)
        .antithetic(opts.antithetic)
        .method(opts.method);
    let batch = simulate_batch(model, schedule, class, grid, &spec)?;
    let reward = reward_estimate(&batch, alpha, opts.antithetic);
    let mut records = batch
        .par_iter()
        .map(|traj| adjoint_backward(model, traj, alpha, &opts.adjoint))
        .collect::<Result<Vec<_>>>()?;
    if let Some(q) = opts.quantile_clip {
        let mut dr: Vec<Vec<f64>> = records.iter().map(|r| r.dr_dw.clone()).collect();
        clip_quantile(&mut dr, q);
        for (r, d) in records.iter_mut().zip(dr) {
            r.dr_dw = d;
        }
    }
    let mut grad = vec![0.0; schedule.num_params()];
    let mut w_sum = vec![0.0; grid.len()];
    let mut clips = 0;
    for (traj, rec) in batch.iter().zip(&records) {
        axpy(1.0 / batch.len() as f64, &param_gradient(schedule, traj, rec)?, &mut grad);
        axpy(1.0, &traj.w_values, &mut w_sum);
        clips += rec.clip_events;
    }
    Ok(ClassStep { reward, grad, w_sum, clips })
}

/// Runs `opts.iterations` ascent steps on `schedule`.
pub fn train(
    model: &MixtureModel,
    schedule: &GuidanceSchedule,
    classes: &[ClassLabel],
    grid: &TimeGrid,
    alpha: f64,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if classes.is_empty() {
        return invalid("training needs at least one class");
    }
    if !(alpha > 0.0) || !(opts.learning_rate > 0.0) || !(opts.clip_norm > 0.0) {
        return invalid("alpha, learning rate and clip norm must be positive");
    }
    if !schedule.is_trainable() {
        return invalid("raw constant schedules are not trainable");
    }
    if let Some(q) = opts.quantile_clip {
        if !(q > 0.0 && q <= 1.0) {
            return invalid("quantile must lie in (0, 1]");
        }
    }
    BatchSpec::new(opts.paths_per_class, 0).antithetic(opts.antithetic).validate()?;
    for &c in classes {
        model.class_prior(c)?;
    }
    let mut schedule = schedule.clone();
    let mut history = Vec::with_capacity(opts.iterations);
    let mut adam = Adam::new(schedule.num_params());
    for iteration in 0..opts.iterations {
        let mut steps = Vec::with_capacity(classes.len());
        for (ci, &c) in classes.iter().enumerate() {
            match class_step(model, &schedule, c, grid, alpha, opts, batch_seed(opts.seed, iteration, ci)) {
                Ok(s) => steps.push(s),
                Err(e @ Error::Divergence { .. }) => {
                    return Ok(TrainOutcome { schedule, history, failure: Some(e) });
                }
                Err(e) => return Err(e),
            }
        }
        let k = classes.len() as f64;
        let mut grad = vec![0.0; schedule.num_params()];
        let mut mean_w = vec![0.0; grid.len()];
        let mut clips = 0;
        let mut mean = 0.0;
        let mut var = 0.0;
        for s in &steps {
            axpy(1.0 / k, &s.grad, &mut grad);
            axpy(1.0 / (k * opts.paths_per_class as f64), &s.w_sum, &mut mean_w);
            clips += s.clips;
            mean += s.reward.mean / k;
            var += s.reward.stderr.powi(2) / (k * k);
        }
        let grad_norm = norm(&grad);
        if grad_norm > opts.clip_norm {
            grad.iter_mut().for_each(|g| *g *= opts.clip_norm / grad_norm);
        }
        history.push(RewardReport {
            iteration,
            mean_reward: mean,
            stderr: var.sqrt(),
            mean_w,
            grad_norm,
            clip_events: clips,
        });
        let direction = match opts.optimizer {
            Optimizer::Sgd => grad,
            Optimizer::Adam => {
                if grad.iter().all(|g| *g == 0.0) {
                    grad
                } else {
                    adam.direction(&grad)
                }
            }
        };
        axpy(opts.learning_rate, &direction, &mut schedule.raw_params);
        log::info!("iteration {iteration}: reward {mean:.6} grad norm {grad_norm:.3e}");
    }
    Ok(TrainOutcome { schedule, history, failure: None })
}

/// Training log with header `iteration,mean_reward,stderr,grad_norm,clip_events`.
pub fn write_training_log<W: Write>(mut out: W, history: &[RewardReport]) -> Result<()> {
    writeln!(out, "iteration,mean_reward,stderr,grad_norm,clip_events")?;
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration,
            fmt_f64(r.mean_reward),
            fmt_f64(r.stderr),
            fmt_f64(r.grad_norm),
            r.clip_events
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uninformative() -> MixtureModel {
        let mut comps = MixtureModel::reference_mixture().components().to_vec();
        for c in &mut comps {
            c.class = 0;
        }
        MixtureModel::new(2, 5.0, comps).unwrap()
    }

    fn small_opts() -> TrainOptions {
        TrainOptions {
            iterations: 3,
            paths_per_class: 16,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn zero_iterations_leave_schedule_unchanged() {
        let m = MixtureModel::reference_mixture();
        let g = TimeGrid::uniform(5.0, 16, 0.01).unwrap();
        let s = GuidanceSchedule::table(g.nodes(), 0.2).unwrap();
        let out = train(&m, &s, &[0, 1], &g, 5.0, &TrainOptions { iterations: 0, ..small_opts() }).unwrap();
        assert_eq!(out.schedule, s);
        assert!(out.history.is_empty());
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let m = uninformative();
        let g = TimeGrid::uniform(5.0, 16, 0.01).unwrap();
        let s = GuidanceSchedule::table(g.nodes(), 0.2).unwrap();
        for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
            let out = train(&m, &s, &[0], &g, 5.0, &TrainOptions { optimizer, ..small_opts() }).unwrap();
            assert_eq!(out.schedule.raw_params, s.raw_params);
            assert!(out.history.iter().all(|r| r.grad_norm == 0.0 && r.mean_reward == 0.0));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let m = MixtureModel::reference_mixture();
        let g = TimeGrid::uniform(5.0, 16, 0.01).unwrap();
        let s = GuidanceSchedule::table(g.nodes(), 0.2).unwrap();
        let a = train(&m, &s, &[0, 2], &g, 5.0, &small_opts()).unwrap();
        let b = train(&m, &s, &[0, 2], &g, 5.0, &small_opts()).unwrap();
        assert_eq!(a.schedule, b.schedule);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn gradient_is_clipped_to_norm() {
        let m = MixtureModel::reference_mixture();
        let g = TimeGrid::uniform(5.0, 16, 0.01).unwrap();
        let s = GuidanceSchedule::table(g.nodes(), 0.2).unwrap();
        let opts = TrainOptions {
            iterations: 1,
            optimizer: Optimizer::Sgd,
            learning_rate: 1.0,
            clip_norm: 1e-6,
            ..small_opts()
        };
        let out = train(&m, &s, &[1], &g, 5.0, &opts).unwrap();
        let step: Vec<f64> = out.schedule.raw_params.iter().zip(&s.raw_params).map(|(a, b)| a - b).collect();
        assert!(out.history[0].grad_norm > 1e-6);
        assert!((norm(&step) - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn quantile_clip_bounds_values() {
        let mut v = vec![vec![1.0, -5.0, 2.0], vec![0.5, 10.0]];
        clip_quantile(&mut v, 0.5);
        assert!(v.iter().flatten().all(|x| x.abs() <= 2.0));
    }

    #[test]
    fn training_log_has_header() {
        let mut buf = Vec::new();
        write_training_log(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,mean_reward,stderr,grad_norm,clip_events\n");
    }
}
