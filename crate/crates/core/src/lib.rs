//! Joint quantization- and variation-aware training for analog in-memory
//! inference, chip-population evaluation and self-tuning correction.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod gradcheck;
pub mod kernels;
pub mod network;
pub mod quantization;
pub mod rng;
pub mod selftuning;
pub mod tensor;
pub mod training;
pub mod variability;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
