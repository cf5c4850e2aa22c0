//! Bayes-adaptive sequential Monte-Carlo planning over amortized variational
//! beliefs, with an expectation-maximization training loop.

pub mod autodiff;
pub mod belief;
pub mod config;
pub mod envs;
pub mod error;
pub mod models;
pub mod nn;
pub mod oracle;
pub mod planner;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
