//! Zero-shot multimodal homography estimation toolkit.
//!
//! The crate bundles everything needed to train and evaluate a cross-scale,
//! color-invariant homography estimator without any aligned multimodal data:
//!
//! - [`geometry`]: four-point offset parameterization, DLT, warping, MACE.
//! - [`raster`]: a small planar float image type with PNG I/O.
//! - [`synth`]: style-diverse unaligned pair synthesis with ground truth.
//! - [`autodiff`]: a reverse-mode tape over dense f64 tensors.
//! - [`model`]: the multiscale correlation estimator with color decoupling.
//! - [`train`]: supervised training loop (AdamW, one-cycle schedule).
//! - [`eval`]: MACE evaluation harness, reports and overlay rendering.
//!
//! The `homreg` binary exposes the synth/train/eval/viz/inspect subcommands.

pub mod autodiff;
pub mod config;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod raster;
pub mod smoothing;
pub mod synth;
pub mod train;
