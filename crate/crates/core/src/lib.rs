//! Volumetric anatomical landmark detection with atlas location autocontext.
//!
//! Two shallow fully convolutional networks regress one Gaussian heatmap per
//! landmark. The first runs on the image alone at coarse resolution; its
//! detections are aligned to a landmark atlas by certainty-weighted,
//! outlier-pruned affine least squares. The second network runs at fine
//! resolution on the image plus the atlas-frame coordinates of every voxel,
//! restricted to spherical regions around the atlas-predicted positions.
//!
//! Modules:
//!
//! - [`volume`]: volumes, landmark sets, I/O, resampling, augmentation.
//! - [`nnet`]: valid-mode 3D convolution network, backprop, Adam, training.
//! - [`heatmap`]: Gaussian targets, patch sampling, tiled inference, argmax.
//! - [`atlas`]: weighted affine fitting, iterative refinement, correction.
//! - [`cascade`]: the two-pass pipeline, its training and bundle format.
//! - [`phantom`]: synthetic head phantoms with exact ground truth.
//! - [`evalkit`]: error metrics, reports and MIP images.
//! - [`cli`]: the command-line front end.

pub mod atlas;
pub mod cascade;
pub mod cli;
pub mod error;
pub mod evalkit;
pub mod heatmap;
pub mod nnet;
pub mod phantom;
pub mod seeding;
pub mod volume;

pub use error::{Error, Result};
