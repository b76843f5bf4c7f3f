//! Cyclic policy distillation over partitioned domain-randomization spaces.

pub mod agent;
pub mod approx;
pub mod baselines;
pub mod cpd;
pub mod domain;
pub mod envsim;
pub mod error;
pub mod exp;
pub mod mixing;

pub use error::{Error, Result};
