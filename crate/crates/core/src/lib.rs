//! Masked generative token models with discrete self-guided sampling.

pub mod adapter;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod experiments;
pub mod generator;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
