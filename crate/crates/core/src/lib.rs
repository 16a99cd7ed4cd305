//! Off-policy soft actor-critic from pixels, with jointly trained
//! convolutional autoencoders (plain, beta-VAE, regularized deterministic),
//! on small self-rendered continuous-control tasks.

pub mod agent;
pub mod cli;
pub mod config;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod nets;
pub mod objectives;
pub mod params;
pub mod replay;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Adam, AdamConfig, ParamId, ParamStore};
pub use tensor::{Graph, Tensor, Var};
