//! Groupwise image registration with the δ-RPCA dissimilarity.
//!
//! A group of images is registered by jointly estimating one displacement field per
//! image and a low-rank approximation `L` of the warped Casorati matrix. The
//! dissimilarity is the ℓ1 distance between the warped images and `L`, subject to a
//! nuclear-norm ball constraint on the centered matrix `L - L̄`. Deformations are
//! regularized with total variation and solved by repeated linearization, a
//! first-order primal-dual method, and a coarse-to-fine pyramid.
//!
//! Module map:
//!
//! - [`grid`]: images, displacement fields, interpolation, resampling, landmarks.
//! - [`lowrank`]: SVD helpers, nuclear norm, ℓ1-ball projection, power iteration.
//! - [`operators`]: matrix-free TV, centering and composite block operators.
//! - [`prox`]: proximal maps of the dual blocks and the uniqueness constraint.
//! - [`solver`]: the primal-dual iteration.
//! - [`metrics`]: D_VAR, D_PCA2, D_PCP, D_δ-RPCA and landmark accuracy.
//! - [`multilevel`]: the full coarse-to-fine registration driver.
//! - [`synth`]: textured-ellipse benchmark and prescribed deformation families.
//! - [`io`]: file formats and configuration parsing used by the command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod grid;
pub mod io;
pub mod lowrank;
pub mod metrics;
pub mod multilevel;
pub mod operators;
pub mod prox;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
