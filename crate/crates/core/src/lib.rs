//! Meta-Stackelberg defense for federated learning: a federated-learning
//! simulator with robust aggregation and model-poisoning attacks, the
//! Bayesian Stackelberg Markov game built on top of it, and the meta-learning
//! trainers for the defender.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops in the numeric kernels mirror the formulas they implement.
#![allow(clippy::needless_range_loop)]

pub mod aggregation;
pub mod attacks;
pub mod bsmg;
pub mod data;
pub mod error;
pub mod fixtures;
pub mod meta;
pub mod policy;
pub mod seed;

pub use error::{Error, Result};
