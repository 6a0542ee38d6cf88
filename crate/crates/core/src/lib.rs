//! Desk-scale adversarial robustness toolkit.
//!
//! Reproduces the gradient-masking phenomenon that appears when a
//! differentiable residual front-end is briefly trained against a frozen
//! backbone, together with the evaluation machinery needed to expose it:
//! a small tensor/autodiff runtime, a model zoo (front-ends, backbones,
//! composites, randomized ensembles), three training regimes, a
//! gradient/black-box/bypass attack suite, transfer-matrix analysis for
//! randomized defenses, and masking diagnostics.

pub mod attacks;
pub mod check;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
