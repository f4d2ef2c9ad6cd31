//! The pair synthesis pipeline: crop, stylize, smooth, perturb, center-crop.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::renderer::StyleRenderer;
use super::{SynthConfig, SynthError};
use crate::geometry::{offsets_to_homography, warp_image, CornerSet, FourPointOffsets};
use crate::raster::Image;
use crate::smoothing::l0_smooth;

/// Everything needed to regenerate or audit a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub content_id: String,
    pub template_ids: (String, String),
    pub alpha_i: f64,
    pub alpha_j: f64,
    pub beta_i: f64,
    pub beta_j: f64,
    pub crop_xy: (usize, usize),
    pub rng_seed: u64,
}

/// One supervised training triple plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub src_image: Image,
    pub tar_image: Image,
    pub gt_offsets: FourPointOffsets,
    pub provenance: Provenance,
}

/// Identifiers recorded in provenance.
#[derive(Debug, Clone, Default)]
pub struct SampleIds {
    pub content_id: String,
    pub template_i: String,
    pub template_j: String,
    pub rng_seed: u64,
}

/// Dedicated RNG stream for sample `index` under a dataset seed.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Crop a `size`x`size` window with top-left at (x, y); no resampling.
pub fn crop_patch(content: &Image, x: usize, y: usize, size: usize) -> Result<Image, SynthError> {
    Ok(content.crop(x, y, size)?)
}

/// Blend the patch with its stylized rendering: `a*patch + (1-a)*render`.
pub fn stylize(
    patch: &Image,
    template: &Image,
    alpha: f64,
    renderer: &dyn StyleRenderer,
) -> Result<Image, SynthError> {
    assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0,1]");
    let rendered = renderer.render(patch, template)?;
    let expected = (3, patch.height, patch.width);
    let got = (rendered.channels, rendered.height, rendered.width);
    if got != expected {
        return Err(SynthError::RendererShapeMismatch { expected, got });
    }
    let mut out = Image::zeros(3, patch.height, patch.width);
    let n = patch.height * patch.width;
    for c in 0..3 {
        let pc = if patch.channels == 1 { 0 } else { c };
        for i in 0..n {
            let v = alpha * patch.data[pc * n + i] + (1.0 - alpha) * rendered.data[c * n + i];
            out.data[c * n + i] = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// L0 gradient smoothing (weight 0 is the identity).
pub fn smooth(image: &Image, weight: f64) -> Image {
    l0_smooth(image, weight)
}

/// Maximum per-channel difference between the target and the source
/// realigned by the ground-truth homography, over pixels whose resample
/// point stays at least `border` pixels inside the source crop. Diagnostic
/// for synthesis correctness; style differences between the two crops
/// contribute to the returned error.
pub fn realignment_interior_error(sample: &TrainingSample, border: f64) -> f64 {
    let s = sample.tar_image.width;
    let corners = CornerSet::square(0.0, 0.0, s as f64);
    let h = offsets_to_homography(&corners, &sample.gt_offsets)
        .expect("ground-truth offsets solved during synthesis")
        .to_matrix();
    let lo = border;
    let hi = s as f64 - 1.0 - border;
    let mut worst = 0.0f64;
    for y in 0..s {
        for x in 0..s {
            let p = h * nalgebra::Vector3::new(x as f64, y as f64, 1.0);
            let (u, v) = (p[0] / p[2], p[1] / p[2]);
            if u < lo || u > hi || v < lo || v > hi {
                continue;
            }
            for c in 0..sample.tar_image.channels {
                let d = (sample.src_image.sample_bilinear(c, u, v)
                    - sample.tar_image.get(c, x, y))
                .abs();
                worst = worst.max(d);
            }
        }
    }
    worst
}

/// Eight independent integers uniform on {-p, ..., p}.
pub fn sample_offsets(p: i32, rng: &mut impl RngCore) -> FourPointOffsets {
    assert!(p >= 0);
    let mut o = [[0.0; 2]; 4];
    for d in &mut o {
        d[0] = rng.gen_range(-p..=p) as f64;
        d[1] = rng.gen_range(-p..=p) as f64;
    }
    FourPointOffsets(o)
}

/// Full synthesis of one sample. RNG draw order: crop x, crop y, alpha_i,
/// alpha_j, beta_i, beta_j, offsets.
pub fn synthesize_pair(
    content: &Image,
    template_i: &Image,
    template_j: &Image,
    cfg: &SynthConfig,
    renderer: &dyn StyleRenderer,
    rng: &mut impl RngCore,
    ids: &SampleIds,
) -> Result<TrainingSample, SynthError> {
    cfg.validate()?;
    let padded = cfg.padded_size();
    if content.width < padded || content.height < padded {
        return Err(SynthError::ContentTooSmall {
            need: padded,
            w: content.width,
            h: content.height,
        });
    }
    let x = rng.gen_range(0..=content.width - padded);
    let y = rng.gen_range(0..=content.height - padded);
    let patch = crop_patch(content, x, y, padded)?;

    let alpha_i = rng.gen_range(cfg.content_weight_min..=cfg.content_weight_max);
    let alpha_j = rng.gen_range(cfg.content_weight_min..=cfg.content_weight_max);
    let src_styled = stylize(&patch, template_i, alpha_i, renderer)?;
    let tar_styled = stylize(&patch, template_j, alpha_j, renderer)?;

    let beta_i = if cfg.smoothing_bound > 0.0 {
        rng.gen_range(0.0..=cfg.smoothing_bound)
    } else {
        0.0
    };
    let beta_j = if cfg.smoothing_bound > 0.0 {
        rng.gen_range(0.0..=cfg.smoothing_bound)
    } else {
        0.0
    };
    let mut src_smooth = smooth(&src_styled, beta_i);
    let mut tar_smooth = smooth(&tar_styled, beta_j);
    src_smooth.clamp01();
    tar_smooth.clamp01();

    let gt_offsets = sample_offsets(cfg.max_perturbation, rng);

    // warp the source by the homography that maps the center square's
    // corners onto corners + offsets, then center-crop both
    let m = cfg.margin / 2;
    let corners = CornerSet::square(m as f64, m as f64, cfg.patch_size as f64);
    let h_mat = offsets_to_homography(&corners, &gt_offsets)?;
    let src_warped = warp_image(&src_smooth, &h_mat, (padded, padded))?;

    let src_image = src_warped.crop(m, m, cfg.patch_size)?;
    let tar_image = tar_smooth.crop(m, m, cfg.patch_size)?;

    Ok(TrainingSample {
        src_image,
        tar_image,
        gt_offsets,
        provenance: Provenance {
            content_id: ids.content_id.clone(),
            template_ids: (ids.template_i.clone(), ids.template_j.clone()),
            alpha_i,
            alpha_j,
            beta_i,
            beta_j,
            crop_xy: (x, y),
            rng_seed: ids.rng_seed,
        },
    })
}
