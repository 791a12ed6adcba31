//! Adaptive guidance for diffusion models on analytic mixture targets.
//!
//! The crate works with data distributions that are finite mixtures of
//! isotropic Gaussians (or point masses) pushed through the forward
//! Ornstein–Uhlenbeck process `dX = -X dt + sqrt(2) dB`. For those targets
//! every score, posterior and guiding-field derivative is available in closed
//! form, which makes it possible to
//!
//! * simulate the guided reverse SDE ([`sde`]),
//! * check the martingale, Doob, Itô and support-recovery properties of guided
//!   sampling ([`guarantees`]),
//! * solve the Hamilton–Jacobi–Bellman equation for the optimal guidance field
//!   on a 2-D grid ([`hjb`]),
//! * train per-timestep guidance schedules with an exact discrete adjoint
//!   ([`adjoint`], [`train`]).
//!
//! Two clocks appear throughout. *Forward time* `tau` indexes the noising
//! process (`tau = 0` is data). *Backward time* `t` indexes the sampler, which
//! runs from `t = 0` (pure noise) towards `t = T`; the two are related by
//! `tau = T - t`. Functions name the clock they take in their argument names.

// `!(x > 0.0)` is used on purpose so that NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod cli;
pub mod error;
pub mod guarantees;
pub mod hjb;
pub mod io;
pub mod linalg;
pub mod model;
pub mod schedule;
pub mod sde;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
pub use model::{Component, MixtureModel};
pub use schedule::{GuidancePolicy, GuidanceSchedule};
pub use sde::{Method, PathNoise, TimeGrid, Trajectory};
