//! Differentially private federated learning with Laplacian smoothing.
//!
//! The crate is organised by concern:
//!
//! - [`lapsmooth`]: the circulant smoothing operator `(I + σL)⁻¹` and its
//!   spectral quantities.
//! - [`denoise`]: James-Stein and soft-thresholding baselines.
//! - [`privacy`]: Rényi-DP accounting and noise calibration.
//! - [`fedsim`]: the federated training engine.
//! - [`objectives`]: logistic regression and synthetic quadratics.
//! - [`data`]: IDX loading, partitioning and synthetic data.
//! - [`attack`]: loss-threshold membership inference.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod data;
pub mod denoise;
pub mod error;
pub mod fedsim;
pub mod lapsmooth;
pub mod objectives;
pub mod privacy;
pub mod rng;
pub mod vecops;

pub use error::{Error, Result};
