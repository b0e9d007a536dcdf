//! LiSA: structure-aware attention with log-linear cost via circular
//! convolutions evaluated in the frequency domain.
//!
//! * [`ndtensor`]: dense f64 tensors and the primitives the operators need
//! * [`fourier`]: FFT engine, real/2D transforms and circular convolution
//! * [`attention_ref`]: quadratic reference operators used as oracles
//! * [`lisa`]: the FFT operator, its backward pass and multi-head wrapper
//! * [`model`]: transformer blocks and the isotropic classifier
//! * [`cost`], [`bench`], [`kernels`], [`container`]: cost model, benchmarks,
//!   kernel export and tensor serialization

pub mod attention_ref;
pub mod bench;
pub mod container;
pub mod cost;
pub mod error;
pub mod exec;
pub mod fourier;
pub mod kernels;
pub mod lisa;
pub mod model;
pub mod ndtensor;
pub mod random;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Exec;
pub use ndtensor::Tensor;
