// This Source Code Form is subject to the terms of the Mozilla Public
// License, v. 2.0. If a copy of the MPL was not distributed with this
// file, You can obtain one at http://mozilla.org/MPL/2.0/.

//! Robust calibration of radio interferometers under compound-Gaussian noise.
//!
//! The crate is organised bottom-up:
//!
//! - [`scene`]: array geometry, sky model and known direction-dependent effects;
//! - [`jones`]: the Jones chain `G·H·Z·F`, parameter vectors and visibility prediction;
//! - [`noise`]: texture priors, speckle covariances and contamination of simulated data;
//! - [`likelihood`]: residuals, conditional/joint log-likelihoods and the speckle update;
//! - [`texture`]: closed-form texture MAP updates and hyperparameter fits;
//! - [`solver`]: damped Gauss-Newton for the per-frequency parameters and consensus ADMM;
//! - [`calibrate`]: the iterative MAP loop and the Gaussian least-squares baseline;
//! - [`bench`]: Monte-Carlo MSE-versus-SNR experiments.

pub mod bench;
pub mod calibrate;
mod error;
pub mod jones;
pub mod likelihood;
pub mod noise;
pub mod scene;
pub mod solver;
pub mod texture;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = nalgebra::Complex<f64>;
/// 2×2 complex matrix (Jones matrices, coherencies).
pub type Mat2 = nalgebra::Matrix2<C64>;
/// 4×4 complex matrix (speckle covariances).
pub type Mat4 = nalgebra::Matrix4<C64>;
/// Vectorised 2×2 correlation (one baseline's measurement).
pub type Vec4 = nalgebra::Vector4<C64>;

/// Dimension of one baseline's complex data vector. The texture update
/// constants (`N + 1 = 5`, `2N + 3 = 11`, ...) are written in terms of it.
pub const DATA_DIM: usize = 4;
