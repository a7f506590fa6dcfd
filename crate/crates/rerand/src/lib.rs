//! Design and analysis of rerandomized treatment-control experiments.
//!
//! Rerandomization draws complete randomizations repeatedly and keeps only
//! those that satisfy a covariate balance criterion. This crate generates
//! such balanced assignments (Mahalanobis, tiered, or user-supplied
//! criteria), and analyzes the resulting experiments with the non-Gaussian
//! asymptotic distribution of the difference-in-means estimator: a linear
//! combination of a Gaussian residual and truncated-Gaussian projection
//! terms. It provides variance estimates and confidence intervals that are
//! shorter than the classical complete-randomization intervals, a Monte
//! Carlo engine for the asymptotic law, exact small-instance enumeration,
//! and a replication harness for coverage and variance-reduction studies.
//!
//! See the `examples/` directory for one runnable example per capability;
//! the `rerand` binary exposes the same workflows as subcommands
//! (`assign`, `analyze`, `dist`, `simulate`, `enumerate`).

pub mod asymptotics;
pub mod cli;
pub mod criteria;
pub mod error;
pub mod inference;
pub mod population;
pub mod sampler;
pub mod simulate;
pub mod specialfn;

pub use error::{Error, Result};
