//! Estimation of individual treatment effects (main, spillover and total)
//! from observational network data.
//!
//! The estimator combines balancing weights from a factorized joint
//! propensity score (individual treatment times neighborhood exposure) with a
//! representation whose distribution is balanced across treatment pairs by an
//! entropic Wasserstein penalty. The crate also ships a semi-synthetic data
//! generator, exact checks of the generalization-bound inequalities on small
//! discrete scenarios, and an experiment harness.

pub mod balance;
pub mod error;
pub mod estimator;
pub mod graph;
pub mod harness;
pub mod propensity;
pub mod synth;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
