//! Depth-clustering-guided feature whitening for multi-view stereo.
//!
//! The crate bundles the numerical pieces needed to evaluate a
//! depth-clustering-guided whitening (DCW) regularizer outside of a deep
//! learning framework, together with the point-cloud benchmark used to score
//! reconstructions:
//!
//! - [`tensor`]: dense `f64` tensors and a small reverse-mode tape, plus
//!   central-difference gradient checking.
//! - [`geometry`]: pinhole cameras, depth maps, unprojection, projection,
//!   bilinear sampling and depth-driven cross-view warping.
//! - [`clustering`]: multi-view fusion, seeded K-Means and per-view cluster
//!   maps.
//! - [`whitening`]: feature mean/covariance, Jacobi eigendecomposition, ZCA
//!   whitening, instance standardization and the whitening loss.
//! - [`dcw`]: cross-view cluster covariances, augmentation variance,
//!   adaptive selection masks, the DCW loss and the full pipeline.
//! - [`eval3d`]: kd-tree nearest neighbours, Chamfer components,
//!   precision/recall/F-score, DTU scores, mesh sampling, depth-map fusion
//!   and MMD.
//! - [`io`]: PFM, PLY, `cam.txt`, RMVT tensors, PGM cluster maps, PPM
//!   images, the flat config format and scene directories.
//! - [`gradcheck`]: finite-difference checks of every differentiable path.
//! - [`synthetic`]: analytic plane scenes for tests and demos.

pub mod clustering;
pub mod dcw;
pub mod error;
pub mod eval3d;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod synthetic;
pub mod tensor;
pub mod whitening;

pub use error::{Error, Result};
