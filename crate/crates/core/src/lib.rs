//! Surface normal estimation for unstructured point clouds.
//!
//! The crate bundles everything needed to go from raw `.xyz` files to scored
//! normal predictions:
//!
//! - [`geometry`]: point clouds, exact kd-tree kNN, patch extraction and
//!   canonicalization (radius normalization + PCA frame).
//! - [`classical`]: PCA plane fitting and n-jet polynomial fitting baselines.
//! - [`autodiff`]: a small define-by-run reverse-mode engine over dense
//!   `f64` arrays, with Adam and a finite-difference checker.
//! - [`model`]: the learned regressor, built from enhanced graph convolution
//!   and global-attention transformer encoder layers, plus ablation variants.
//! - [`training`]: synthetic surfaces with analytic normals, noise and density
//!   corruptions, batch sampling and the training loop.
//! - [`evaluation`]: angular RMSE, PGP curves, heatmap export, benchmarking.
//! - [`cli`]: the `sne` command-line driver.

pub mod autodiff;
pub mod classical;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod training;

pub use error::{Error, Result};
