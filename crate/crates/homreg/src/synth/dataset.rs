//! On-disk dataset layout:
//! `root/manifest.json`, `root/sample_%06d/{src.png, tar.png, gt.json}`.
//!
//! `gt.json` holds the offsets (four `[dx, dy]` pairs in TL, TR, BR, BL
//! order), the patch size, full provenance, and a SHA-256 checksum of the
//! two PNG byte streams. Images quantize to 8-bit on write.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pipeline::{Provenance, TrainingSample};
use super::{SynthConfig, SynthError};
use crate::geometry::FourPointOffsets;
use crate::raster::Image;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub count: usize,
    pub config: SynthConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct GtRecord {
    offsets: FourPointOffsets,
    patch_size: usize,
    provenance: Provenance,
    checksum: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("sample_{index:06}"))
}

fn png_checksum(src_png: &[u8], tar_png: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(src_png);
    hasher.update(tar_png);
    format!("{:x}", hasher.finalize())
}

pub fn write_sample(sample: &TrainingSample, root: &Path, index: usize) -> Result<(), SynthError> {
    let dir = sample_dir(root, index);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let src_png = sample.src_image.encode_png()?;
    let tar_png = sample.tar_image.encode_png()?;
    for (name, bytes) in [("src.png", &src_png), ("tar.png", &tar_png)] {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(bytes).map_err(io_err(&path))?;
    }

    let record = GtRecord {
        offsets: sample.gt_offsets,
        patch_size: sample.tar_image.width,
        provenance: sample.provenance.clone(),
        checksum: png_checksum(&src_png, &tar_png),
    };
    let path = dir.join("gt.json");
    let json = serde_json::to_vec_pretty(&record)?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(())
}

pub fn read_sample(root: &Path, index: usize) -> Result<TrainingSample, SynthError> {
    let dir = sample_dir(root, index);
    let corrupt = |msg: String| SynthError::CorruptSample(dir.display().to_string(), msg);
    if !dir.is_dir() {
        return Err(corrupt("sample directory missing".into()));
    }

    let gt_path = dir.join("gt.json");
    let gt_bytes = fs::read(&gt_path).map_err(io_err(&gt_path))?;
    let record: GtRecord = serde_json::from_slice(&gt_bytes)?;

    let src_png = fs::read(dir.join("src.png")).map_err(io_err(&dir.join("src.png")))?;
    let tar_png = fs::read(dir.join("tar.png")).map_err(io_err(&dir.join("tar.png")))?;
    let checksum = png_checksum(&src_png, &tar_png);
    if checksum != record.checksum {
        return Err(corrupt(format!(
            "checksum mismatch: recorded {}, actual {}",
            record.checksum, checksum
        )));
    }

    let src_image = Image::decode_png(&src_png)?;
    let tar_image = Image::decode_png(&tar_png)?;
    if tar_image.width != record.patch_size || tar_image.height != record.patch_size {
        return Err(corrupt(format!(
            "target is {}x{} but gt.json records patch_size {}",
            tar_image.width, tar_image.height, record.patch_size
        )));
    }
    Ok(TrainingSample {
        src_image,
        tar_image,
        gt_offsets: record.offsets,
        provenance: record.provenance,
    })
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<(), SynthError> {
    let path = root.join("manifest.json");
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest, SynthError> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(SynthError::FormatVersionMismatch {
            expected: FORMAT_VERSION.into(),
            got: manifest.format_version,
        });
    }
    Ok(manifest)
}
