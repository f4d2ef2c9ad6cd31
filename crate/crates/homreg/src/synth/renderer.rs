//! Style renderer contract and implementations.

use std::path::PathBuf;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::SynthError;
use crate::raster::Image;

/// Renders a content patch in the style of a template image. Output must be
/// 3-channel, the same spatial size as the content, with values in [0, 1].
pub trait StyleRenderer: Sync {
    fn render(&self, content: &Image, template: &Image) -> Result<Image, SynthError>;
    fn name(&self) -> &'static str;
}

/// Pass-through renderer; useful for alignment tests and ablations.
pub struct IdentityRenderer;

impl StyleRenderer for IdentityRenderer {
    fn render(&self, content: &Image, _template: &Image) -> Result<Image, SynthError> {
        Ok(content.clone())
    }

    fn name(&self) -> &'static str {
        "identity"
    }
}

/// Deterministic procedural stylizer: a luminance-driven palette remap using
/// colors sampled from the template, a low-frequency color field, and a faint
/// resized-template overlay. All randomness derives from the renderer seed
/// and a digest of the template, so identical inputs render identically.
pub struct ProceduralStyler {
    pub seed: u64,
}

impl ProceduralStyler {
    pub fn new(seed: u64) -> Self {
        ProceduralStyler { seed }
    }

    fn rng_for(&self, template: &Image) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update((template.width as u64).to_le_bytes());
        hasher.update((template.height as u64).to_le_bytes());
        hasher.update(template.to_rgb8());
        let digest = hasher.finalize();
        ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
    }
}

impl StyleRenderer for ProceduralStyler {
    fn render(&self, content: &Image, template: &Image) -> Result<Image, SynthError> {
        let mut rng = self.rng_for(template);
        let (h, w) = (content.height, content.width);
        let lum = content.luminance();

        // palette anchors sampled from the template, sorted by luma so the
        // remap is monotone in content luminance (structure preserving)
        let mut anchors: Vec<[f64; 3]> = (0..4)
            .map(|_| {
                let x = rng.gen_range(0..template.width);
                let y = rng.gen_range(0..template.height);
                [
                    template.get(0, x, y),
                    template.get(1.min(template.channels - 1), x, y),
                    template.get(2.min(template.channels - 1), x, y),
                ]
            })
            .collect();
        anchors.sort_by(|a, b| {
            let la = 0.299 * a[0] + 0.587 * a[1] + 0.114 * a[2];
            let lb = 0.299 * b[0] + 0.587 * b[1] + 0.114 * b[2];
            la.partial_cmp(&lb).unwrap()
        });

        // low-frequency color field parameters
        let mut field = [[0.0f64; 4]; 3];
        for f in &mut field {
            f[0] = rng.gen_range(0.5..2.0) / w as f64; // fx
            f[1] = rng.gen_range(0.5..2.0) / h as f64; // fy
            f[2] = rng.gen_range(0.0..std::f64::consts::TAU); // phase
            f[3] = rng.gen_range(0.02..0.08); // amplitude
        }
        let overlay_weight = rng.gen_range(0.05..0.15);
        let tpl = template.resize_bilinear(h, w);

        let mut out = Image::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let l = lum.get(0, x, y).clamp(0.0, 1.0);
                // piecewise-linear interpolation across the 4 anchors
                let t = l * 3.0;
                let i0 = (t.floor() as usize).min(2);
                let frac = t - i0 as f64;
                for c in 0..3 {
                    let base = anchors[i0][c] * (1.0 - frac) + anchors[i0 + 1][c] * frac;
                    let f = &field[c];
                    let wave = f[3]
                        * (std::f64::consts::TAU * (f[0] * x as f64 + f[1] * y as f64) + f[2])
                            .sin();
                    let v = base + wave;
                    let v = (1.0 - overlay_weight) * v + overlay_weight * tpl.get(c, x, y);
                    out.set(c, x, y, v.clamp(0.0, 1.0));
                }
            }
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "procedural"
    }
}

/// Adapter for an external style-transfer program (e.g. a pretrained
/// network behind a small script). The command is invoked as
/// `<program> <content.png> <template.png> <output.png>` and must write a
/// PNG of the content's size to the output path.
pub struct CommandRenderer {
    pub program: PathBuf,
    pub work_dir: PathBuf,
}

impl StyleRenderer for CommandRenderer {
    fn render(&self, content: &Image, template: &Image) -> Result<Image, SynthError> {
        let dir = tempdir_in(&self.work_dir)?;
        let c_path = dir.join("content.png");
        let t_path = dir.join("template.png");
        let o_path = dir.join("stylized.png");
        content.save_png(&c_path)?;
        template.save_png(&t_path)?;
        let status = Command::new(&self.program)
            .arg(&c_path)
            .arg(&t_path)
            .arg(&o_path)
            .status()
            .map_err(|e| SynthError::RendererFailed(format!("spawn: {e}")))?;
        if !status.success() {
            return Err(SynthError::RendererFailed(format!(
                "exit status {status}"
            )));
        }
        let out = Image::load_png(&o_path)?;
        let _ = std::fs::remove_dir_all(&dir);
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "command"
    }
}

fn tempdir_in(base: &PathBuf) -> Result<PathBuf, SynthError> {
    let dir = base.join(format!(
        "style-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0)
    ));
    std::fs::create_dir_all(&dir).map_err(|e| SynthError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    Ok(dir)
}
