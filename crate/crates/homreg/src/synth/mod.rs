//! Unaligned training pair synthesis with ground-truth four-point offsets.
//!
//! A content patch is cropped with a margin, rendered in two independent
//! styles, L0-smoothed, and the source half is warped by a homography induced
//! by integer corner offsets before both are center-cropped back to
//! `patch_size`. The ground-truth convention: corner `q` of the target crop
//! corresponds to `corner_q + gt_offsets[q]` in the source crop's frame.

mod dataset;
mod pipeline;
mod renderer;
mod sources;

pub use dataset::{
    read_manifest, read_sample, sample_dir, write_manifest, write_sample, DatasetManifest,
    FORMAT_VERSION,
};
pub use pipeline::{
    crop_patch, realignment_interior_error, sample_offsets, sample_rng, smooth, stylize,
    synthesize_pair, Provenance, SampleIds, TrainingSample,
};
pub use renderer::{CommandRenderer, IdentityRenderer, ProceduralStyler, StyleRenderer};
pub use sources::{generate_dataset, generate_sample, DirSource, ImageSource, ProceduralImages};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("content raster too small: need at least {need}x{need}, got {w}x{h}")]
    ContentTooSmall { need: usize, w: usize, h: usize },
    #[error("renderer output shape mismatch: expected {expected:?}, got {got:?}")]
    RendererShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("renderer failed: {0}")]
    RendererFailed(String),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt sample at {0}: {1}")]
    CorruptSample(String, String),
    #[error("dataset format version mismatch: expected {expected}, got {got}")]
    FormatVersionMismatch { expected: String, got: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Synthesis parameters. `margin >= 2 * max_perturbation` guarantees the
/// perturbed source crop never samples beyond the rendered patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub patch_size: usize,
    pub margin: usize,
    pub max_perturbation: i32,
    pub smoothing_bound: f64,
    pub content_weight_min: f64,
    pub content_weight_max: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            patch_size: 128,
            margin: 64,
            max_perturbation: 32,
            smoothing_bound: 1e-3,
            content_weight_min: 0.0,
            content_weight_max: 1.0,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: String| Err(SynthError::InvalidConfig(m));
        if self.patch_size == 0 {
            return err("patch_size must be positive".into());
        }
        if self.margin % 2 != 0 {
            return err("margin must be even (center crop)".into());
        }
        if self.max_perturbation < 0 {
            return err("max_perturbation must be >= 0".into());
        }
        if (self.margin as i32) < 2 * self.max_perturbation {
            return err(format!(
                "margin {} must be >= 2 * max_perturbation {}",
                self.margin, self.max_perturbation
            ));
        }
        if self.smoothing_bound < 0.0 {
            return err("smoothing_bound must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.content_weight_min)
            || !(0.0..=1.0).contains(&self.content_weight_max)
            || self.content_weight_min > self.content_weight_max
        {
            return err("content weight range must satisfy 0 <= min <= max <= 1".into());
        }
        Ok(())
    }

    /// Side of the rendered patch before the final center crop.
    pub fn padded_size(&self) -> usize {
        self.patch_size + self.margin
    }
}
