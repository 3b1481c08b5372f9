//! Centripetal SGD for convolutional networks.
//!
//! The crate trains small convolutional networks (plain, residual and
//! densely-connected) with an optimizer that pulls clustered filters toward
//! their cluster centre until they are identical, then removes the redundant
//! filters without changing the network's function. Group-Lasso zeroing-out and
//! magnitude pruning are provided as baselines.
//!
//! Module map:
//!
//! - [`tensor`] / [`ops`]: dense NHWC tensors and layer kernels.
//! - [`gradcheck`]: finite-difference verification of backprop.
//! - [`network`]: layer graphs with residual-add and dense-concat topologies.
//! - [`cluster`]: filter clustering, constraint propagation, averaging/decay matrices.
//! - [`optim`]: the centripetal update (direct and matrix form), baselines, redundancy metrics.
//! - [`trim`]: lossless trimming, equivalence checks, magnitude pruning.
//! - [`harness`]: configs, synthetic data, training loop, model files, metrics.

pub mod cluster;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod network;
pub mod ops;
pub mod optim;
mod par;
pub mod tensor;
pub mod trim;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor4};
