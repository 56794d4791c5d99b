//! Runtime monitoring and monitor-driven repair of neural control policies
//! together with their barrier and Lyapunov certificates, for systems whose
//! dynamics are only available as a black-box simulator.

// `!(a >= b)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certificates;
pub mod dynamics;
mod error;
pub mod harness;
pub mod metrics;
pub mod monitors;
pub mod nn;
pub mod repair;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};
