//! Robust continual learning: gradient projection memory with worst-case data and weight
//! perturbations, hypersphere uniformity/alignment losses, and robustness diagnostics.

pub mod autodiff;
pub mod error;
pub mod evalsuite;
pub mod gpm;
pub mod harness;
pub mod losses;
pub mod model;
pub mod perturbation;
pub mod tensor;
pub mod trainer;

pub use error::{RclError, Result};
pub use tensor::Tensor;
