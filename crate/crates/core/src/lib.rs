//! Consistency flow matching on low-dimensional problems.
//!
//! The crate trains velocity fields `v_θ(t, x)` whose trajectories are
//! straight within each time segment, samples them with a handful of Euler
//! steps, and checks the supporting theory numerically on analytic fields.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod datasets;
pub mod error;
pub mod field;
pub mod losses;
pub mod metrics;
pub mod nd;
pub mod net;
pub mod paths;
pub mod rng;
pub mod sampler;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
