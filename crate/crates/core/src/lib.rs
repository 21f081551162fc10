//! Adversarial group DRO and its baselines (ERM, adversarial training, group
//! DRO) on small linear and MLP classifiers.

pub mod attack;
pub mod checkpoint;
pub mod cli;
pub mod compare;
pub mod config;
pub mod convergence;
pub mod data;
pub mod dro;
pub mod eval;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
