//! Simulator core for a shot-noise-limited optical neural network
//! accelerator: exact-Poisson and Gaussian standard-quantum-limit noise
//! models for homodyne matrix products, noisy network execution (dense and
//! convolutional via patching), backpropagation routed through the same
//! noisy GEMM engine, and closed-form energy accounting.

pub mod conv;
pub mod energy;
pub mod error;
pub mod net;
pub mod noise;
pub mod oracle;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use noise::{NoiseConfig, NoiseMode, PhotonBudget};
pub use rng::Stream;
