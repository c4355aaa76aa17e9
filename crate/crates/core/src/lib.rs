//! Distributed asynchronous learning vector quantization.
//!
//! Several processors each run competitive learning vector quantization on
//! their own sample stream and periodically merge their versions through
//! delayed convex combinations. The crate provides the geometry of
//! quantizers, data distributions, communication schedules with an
//! assumption validator, the agreement machinery, the simulation engine,
//! the single-processor and batch baselines, and convergence diagnostics.

pub mod agreement;
pub mod baselines;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod measures;
pub mod schedule;

pub use error::{Error, Result};
