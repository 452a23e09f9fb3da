//! Robustness certification and Monte Carlo verification for perturbed
//! quantum stochastic master equations.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod did;
pub mod error;
pub mod experiment;
pub mod invariance;
pub mod lyapunov;
pub mod model;
pub mod qcore;
pub mod sde;

pub use error::{Error, Result};
