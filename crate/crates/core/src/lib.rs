//! Simulator and diagnostic engine for causal-bias mechanisms in paired
//! RCT / observational cohorts.
//!
//! The pipeline: draw per-cell probability tables under a bias mechanism
//! ([`synthgen`]), generate paired cohorts, fit nuisance predictors and the
//! per-cell bias estimate b1 = g1 − f1 ([`nuisance`]), compute the
//! covariance between |b1| and the conditional variances of S, A, Y
//! ([`signals`]), and classify the mechanism from the signal signs. Every
//! closed form in [`analytic`] is backed by a brute-force enumeration
//! oracle, and [`harness`] wires the stages into seeded, reproducible
//! batch experiments exposed through the CLI ([`cli_io`]).

pub mod analytic;
pub mod cli_io;
pub mod error;
pub mod harness;
pub mod nuisance;
pub mod signals;
pub mod synthgen;

pub use error::{Error, Result};
