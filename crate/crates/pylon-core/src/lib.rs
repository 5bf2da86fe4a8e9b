//! PYLON: high-resolution weakly-supervised localization at desk scale.
//!
//! The crate provides a fixed differentiable operator set, the PYLON
//! encoder/decoder model family with its ablation variants, a deterministic
//! training loop, localization metrics, a shift-equivariance auditor and a
//! synthetic dataset generator.

pub mod data;
pub mod equivariance;
pub mod error;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod training;

pub use error::{PylonError, Result};
pub use tensor::Tensor4;
