//! Distinctiveness-aware group-relative policy optimization on a synthetic
//! modular-arithmetic task with a tabular softmax policy.

pub mod advantage;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod gradient;
pub mod judge;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
