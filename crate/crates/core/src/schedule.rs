//! Nonnegative guidance-strength schedules `w_theta(t, c)`.
//!
//! Raw parameters pass through softplus and a hard cap. Tables index a time
//! grid; off-grid times use the nearest node, ties going to the earlier node.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::io::fmt_f64;
use crate::model::ClassLabel;

pub const DEFAULT_CAP: f64 = 50.0;

/// Anything that can supply a guidance weight to the sampler.
pub trait GuidancePolicy: Sync {
    /// Weight at backward time `t_back`, state `x`, class `class`.
    fn weight(&self, t_back: f64, x: &[f64], class: ClassLabel) -> Result<f64>;
}

/// Zero guidance: plain conditional sampling.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoGuidance;

impl GuidancePolicy for NoGuidance {
    fn weight(&self, _t: f64, _x: &[f64], _c: ClassLabel) -> Result<f64> {
        Ok(0.0)
    }
}

#[inline]
pub fn softplus(theta: f64) -> f64 {
    theta.max(0.0) + (-theta.abs()).exp().ln_1p()
}

/// Inverse of softplus for `w > 0`.
#[inline]
pub fn softplus_inv(w: f64) -> f64 {
    w + (-(-w).exp_m1()).ln()
}

/// Logistic function, the derivative of softplus.
#[inline]
pub fn sigmoid(theta: f64) -> f64 {
    if theta >= 0.0 {
        1.0 / (1.0 + (-theta).exp())
    } else {
        let e = theta.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    PerNode,
    PerNodePerClass,
    /// Unclamped constant, `w = theta`. Allows negative guidance and sits
    /// outside the positivity contract; not trainable.
    RawConstant,
}

/// Single nonzero entry of `dw/dtheta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamGradient {
    pub index: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSchedule {
    pub kind: ScheduleKind,
    pub raw_params: Vec<f64>,
    /// Backward-time nodes the table indexes (empty for constants).
    pub nodes: Vec<f64>,
    /// Class order of a per-class table (empty otherwise).
    pub classes: Vec<ClassLabel>,
    pub cap: f64,
}

fn check_target(w: f64) -> Result<()> {
    if !(w.is_finite() && w > 0.0) {
        return invalid(format!("guidance target must be positive, got {w}"));
    }
    Ok(())
}

fn check_nodes(nodes: &[f64]) -> Result<()> {
    if nodes.is_empty() || nodes.windows(2).any(|p| !(p[1] > p[0])) {
        return invalid("schedule nodes must be nonempty and strictly increasing");
    }
    Ok(())
}

impl GuidanceSchedule {
    pub fn constant(w0: f64) -> Result<Self> {
        check_target(w0)?;
        Ok(Self {
            kind: ScheduleKind::Constant,
            raw_params: vec![softplus_inv(w0)],
            nodes: Vec::new(),
            classes: Vec::new(),
            cap: DEFAULT_CAP,
        })
    }

    /// One parameter per time node, every node initialized to `init_w`.
    pub fn table(nodes: &[f64], init_w: f64) -> Result<Self> {
        check_target(init_w)?;
        check_nodes(nodes)?;
        Ok(Self {
            kind: ScheduleKind::PerNode,
            raw_params: vec![softplus_inv(init_w); nodes.len()],
            nodes: nodes.to_vec(),
            classes: Vec::new(),
            cap: DEFAULT_CAP,
        })
    }

    /// One parameter per (class, node); parameters are laid out class-major.
    pub fn class_table(nodes: &[f64], classes: &[ClassLabel], init_w: f64) -> Result<Self> {
        check_target(init_w)?;
        check_nodes(nodes)?;
        if classes.is_empty() {
            return invalid("per-class table needs at least one class");
        }
        Ok(Self {
            kind: ScheduleKind::PerNodePerClass,
            raw_params: vec![softplus_inv(init_w); nodes.len() * classes.len()],
            nodes: nodes.to_vec(),
            classes: classes.to_vec(),
            cap: DEFAULT_CAP,
        })
    }

    pub fn raw_constant(w: f64) -> Result<Self> {
        if !w.is_finite() {
            return invalid("raw constant must be finite");
        }
        Ok(Self {
            kind: ScheduleKind::RawConstant,
            raw_params: vec![w],
            nodes: Vec::new(),
            classes: Vec::new(),
            cap: f64::MAX,
        })
    }

    pub fn with_cap(mut self, cap: f64) -> Result<Self> {
        if !(cap > 0.0) {
            return invalid("cap must be positive");
        }
        self.cap = cap;
        Ok(self)
    }

    pub fn num_params(&self) -> usize {
        self.raw_params.len()
    }

    pub fn is_trainable(&self) -> bool {
        self.kind != ScheduleKind::RawConstant
    }

    /// Index of the nearest node; exact midpoints resolve to the earlier node.
    pub fn nearest_node(&self, t: f64) -> usize {
        let nodes = &self.nodes;
        let j = nodes.partition_point(|&n| n < t);
        if j == 0 {
            return 0;
        }
        if j == nodes.len() {
            return nodes.len() - 1;
        }
        if nodes[j] - t < t - nodes[j - 1] {
            j
        } else {
            j - 1
        }
    }

    fn param_index(&self, t: f64, class: ClassLabel) -> Result<usize> {
        Ok(match self.kind {
            ScheduleKind::Constant | ScheduleKind::RawConstant => 0,
            ScheduleKind::PerNode => self.nearest_node(t),
            ScheduleKind::PerNodePerClass => {
                let ci = self
                    .classes
                    .iter()
                    .position(|&c| c == class)
                    .ok_or_else(|| {
                        crate::Error::InvalidInput(format!("schedule has no entry for class {class}"))
                    })?;
                ci * self.nodes.len() + self.nearest_node(t)
            }
        })
    }

    pub fn eval_w(&self, t: f64, class: ClassLabel) -> Result<f64> {
        let idx = self.param_index(t, class)?;
        let theta = self.raw_params[idx];
        Ok(match self.kind {
            ScheduleKind::RawConstant => theta,
            _ => softplus(theta).min(self.cap),
        })
    }

    /// Sparse `dw/dtheta`: one entry, `sigmoid(theta)`, or zero when capped.
    pub fn grad_w_wrt_params(&self, t: f64, class: ClassLabel) -> Result<ParamGradient> {
        let index = self.param_index(t, class)?;
        let theta = self.raw_params[index];
        let value = match self.kind {
            ScheduleKind::RawConstant => 0.0,
            _ if softplus(theta) >= self.cap => 0.0,
            _ => sigmoid(theta),
        };
        Ok(ParamGradient { index, value })
    }

    /// Writes `t_k,class,w_k` rows for every node and requested class.
    pub fn write_csv<W: Write>(&self, mut out: W, classes: &[ClassLabel]) -> Result<()> {
        writeln!(out, "t_k,class,w_k")?;
        let classes: Vec<ClassLabel> = if self.kind == ScheduleKind::PerNodePerClass {
            self.classes.clone()
        } else {
            classes.to_vec()
        };
        let nodes = if self.nodes.is_empty() { vec![0.0] } else { self.nodes.clone() };
        for &c in &classes {
            for &t in &nodes {
                writeln!(out, "{},{},{}", fmt_f64(t), c, fmt_f64(self.eval_w(t, c)?))?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text)?;
        if s.raw_params.iter().any(|p| !p.is_finite()) {
            return invalid("schedule parameters must be finite");
        }
        Ok(s)
    }
}

impl GuidancePolicy for GuidanceSchedule {
    fn weight(&self, t_back: f64, _x: &[f64], class: ClassLabel) -> Result<f64> {
        self.eval_w(t_back, class)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn constant_schedule_returns_requested_value() {
        let s = GuidanceSchedule::constant(0.4).unwrap();
        for t in [0.0, 1.3, 4.99] {
            assert_relative_eq!(s.eval_w(t, 0).unwrap(), 0.4, epsilon = 1e-14);
        }
        let s = GuidanceSchedule::constant(1.0 / 10.0).unwrap();
        assert_relative_eq!(s.eval_w(2.0, 3).unwrap(), 0.1, epsilon = 1e-14);
    }

    #[test]
    fn zero_parameters_give_log_two() {
        let mut s = GuidanceSchedule::table(&[0.0, 0.5, 1.0], 1.0).unwrap();
        s.raw_params.iter_mut().for_each(|p| *p = 0.0);
        assert_relative_eq!(s.eval_w(0.3, 0).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(s.grad_w_wrt_params(0.3, 0).unwrap().value, 0.5);
    }

    #[test]
    fn midpoint_uses_earlier_node() {
        let mut s = GuidanceSchedule::table(&[0.0, 0.5, 1.0], 1.0).unwrap();
        s.raw_params = vec![0.0, 1.0, 2.0];
        assert_eq!(s.nearest_node(0.25), 0);
        assert_eq!(s.nearest_node(0.75), 1);
        assert_eq!(s.nearest_node(0.26), 1);
        assert_eq!(s.nearest_node(-3.0), 0);
        assert_eq!(s.nearest_node(9.0), 2);
        assert_eq!(s.grad_w_wrt_params(0.25, 0).unwrap().index, 0);
    }

    #[test]
    fn table_reproduces_initial_value_at_nodes() {
        let nodes: Vec<f64> = (0..64).map(|k| k as f64 * 4.99 / 63.0).collect();
        let s = GuidanceSchedule::table(&nodes, 0.25).unwrap();
        for &t in &nodes {
            assert_relative_eq!(s.eval_w(t, 0).unwrap(), 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn cap_is_flat() {
        let mut s = GuidanceSchedule::constant(1.0).unwrap();
        s.raw_params[0] = 80.0;
        assert_eq!(s.eval_w(0.0, 0).unwrap(), DEFAULT_CAP);
        assert_eq!(s.grad_w_wrt_params(0.0, 0).unwrap().value, 0.0);
    }

    #[test]
    fn per_class_table_rejects_unknown_class() {
        let s = GuidanceSchedule::class_table(&[0.0, 1.0], &[0, 2], 0.3).unwrap();
        assert!(s.eval_w(0.0, 1).is_err());
        assert_eq!(s.grad_w_wrt_params(1.0, 2).unwrap().index, 3);
    }

    #[test]
    fn nonpositive_targets_are_rejected() {
        assert!(GuidanceSchedule::constant(0.0).is_err());
        assert!(GuidanceSchedule::table(&[0.0, 1.0], -1.0).is_err());
        assert!(GuidanceSchedule::table(&[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn raw_constant_allows_negative_guidance() {
        let s = GuidanceSchedule::raw_constant(-0.3).unwrap();
        assert_eq!(s.eval_w(1.0, 0).unwrap(), -0.3);
        assert!(!s.is_trainable());
    }

    #[test]
    fn softplus_round_trip() {
        let mut w = 1e-3;
        while w <= 40.0 {
            assert!((softplus(softplus_inv(w)) - w).abs() <= 1e-12 * w.max(1.0), "{w}");
            w *= 1.07;
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = GuidanceSchedule::class_table(&[0.0, 1.0, 2.0], &[1, 4], 0.7).unwrap();
        assert_eq!(GuidanceSchedule::from_json(&s.to_json().unwrap()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn weights_are_positive(theta in -700.0f64..700.0) {
            let mut s = GuidanceSchedule::constant(1.0).unwrap();
            s.raw_params[0] = theta;
            let w = s.eval_w(0.0, 0).unwrap();
            prop_assert!(w > 0.0);
        }

        #[test]
        fn derivative_matches_finite_difference(theta in -8.0f64..8.0) {
            let h = 1e-6;
            let fd = (softplus(theta + h) - softplus(theta - h)) / (2.0 * h);
            let mut s = GuidanceSchedule::constant(1.0).unwrap();
            s.raw_params[0] = theta;
            let g = s.grad_w_wrt_params(0.0, 0).unwrap().value;
            prop_assert!((g - fd).abs() <= 1e-6 * g.abs());
        }

        #[test]
        fn constant_baseline_is_representable(w in 1e-3f64..40.0) {
            let s = GuidanceSchedule::table(&[0.0, 1.0, 2.0], w).unwrap();
            for t in [0.0, 0.7, 2.0] {
                prop_assert!((s.eval_w(t, 0).unwrap() - w).abs() <= 1e-12 * w.max(1.0));
            }
        }
    }
}
