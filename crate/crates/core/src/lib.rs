//! Averaged stochastic gradient estimation for locally strongly convex
//! objectives.
//!
//! The crate streams i.i.d. samples through a Robbins–Monro recursion and its
//! running (Polyak–Ruppert) average, and ships what is needed to check the
//! resulting estimators empirically: batch oracles for ground truth,
//! numerical checkers for strong convexity and gradient moments, and a Monte
//! Carlo harness that fits L^p convergence-rate exponents.
//!
//! Supported objectives are geometric quantiles (the geometric median when the
//! direction is zero), robust cosh-logistic regression, logistic regression
//! and a quadratic validation objective.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assumptions;
pub mod averaged_sgd;
pub mod config;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod objectives;
pub mod oracle;
mod par;
pub mod rng;

pub use averaged_sgd::{EstimatorState, StepSchedule};
pub use datagen::{DistributionSpec, Label, Sample};
pub use error::{Error, Result};
pub use linalg::{SymOperator, Vector};
pub use objectives::Objective;
