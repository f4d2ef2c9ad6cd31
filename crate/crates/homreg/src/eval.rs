//! Evaluation harness: corner-error aggregation over datasets or pair lists,
//! JSON reports, side-by-side comparisons, and overlay visualization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::{mace, scale_offsets, FourPointOffsets};
use crate::model::{Model, ModelError};
use crate::raster::{Image, RasterError};
use crate::synth::{read_manifest, read_sample, SynthError, TrainingSample};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Checkpoint(#[from] ModelError),
    #[error("dataset error at sample {index}: {message}")]
    Dataset { index: usize, message: String },
    #[error("pair list error at line {line}: {message}")]
    PairList { line: usize, message: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("report error: {0}")]
    Report(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Evaluation protocol, mirrored verbatim into reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Within,
    Cross,
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub count: usize,
    pub mean_mace: f64,
    pub median_mace: f64,
    pub per_sample_mace: Vec<f64>,
    pub checkpoint_id: String,
    pub protocol: Protocol,
}

impl EvalReport {
    fn from_errors(
        dataset_id: String,
        checkpoint_id: String,
        protocol: Protocol,
        per_sample: Vec<f64>,
    ) -> EvalReport {
        let count = per_sample.len();
        let mean = if count == 0 {
            0.0
        } else {
            per_sample.iter().sum::<f64>() / count as f64
        };
        let mut sorted = per_sample.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let median = if count == 0 {
            0.0
        } else if count % 2 == 1 {
            sorted[count / 2]
        } else {
            0.5 * (sorted[count / 2 - 1] + sorted[count / 2])
        };
        EvalReport {
            dataset_id,
            count,
            mean_mace: mean,
            median_mace: median,
            per_sample_mace: per_sample,
            checkpoint_id,
            protocol,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| EvalError::Report(format!("encode: {e}")))?;
        std::fs::write(path, json).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<EvalReport, EvalError> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes).map_err(|e| EvalError::Report(format!("decode: {e}")))
    }
}

/// Anything that maps an image pair to four-point offsets. Implemented by
/// the trained model and by the baseline stubs used for calibration.
pub trait OffsetPredictor: Sync {
    fn predict(&self, src: &Image, tar: &Image) -> Result<FourPointOffsets, EvalError>;
}

impl OffsetPredictor for Model {
    fn predict(&self, src: &Image, tar: &Image) -> Result<FourPointOffsets, EvalError> {
        Ok(self.estimate(src, tar)?.final_offsets())
    }
}

/// Always predicts zero offsets: the identity-alignment baseline.
pub struct ZeroPredictor;

impl OffsetPredictor for ZeroPredictor {
    fn predict(&self, _src: &Image, _tar: &Image) -> Result<FourPointOffsets, EvalError> {
        Ok(FourPointOffsets::ZERO)
    }
}

/// Analytic mean corner error of the zero-offset baseline when each offset
/// component is uniform on the integers {-p, ..., p}: the exhaustive
/// enumeration of E[sqrt(dx^2 + dy^2)].
pub fn zero_predictor_expected_mace(p: i32) -> f64 {
    assert!(p >= 0);
    let side = (2 * p + 1) as f64;
    let mut acc = 0.0;
    for dx in -p..=p {
        for dy in -p..=p {
            acc += ((dx * dx + dy * dy) as f64).sqrt();
        }
    }
    acc / (side * side)
}

/// Evaluate a predictor over a generated dataset directory.
pub fn evaluate_dataset(
    predictor: &dyn OffsetPredictor,
    root: &Path,
    checkpoint_id: &str,
    protocol: Protocol,
) -> Result<EvalReport, EvalError> {
    let manifest = read_manifest(root).map_err(|e| EvalError::Dataset {
        index: 0,
        message: e.to_string(),
    })?;
    let mut per_sample = Vec::with_capacity(manifest.count);
    for index in 0..manifest.count {
        let sample = read_sample(root, index).map_err(|e| EvalError::Dataset {
            index,
            message: e.to_string(),
        })?;
        let pred = predictor.predict(&sample.src_image, &sample.tar_image)?;
        per_sample.push(mace(&pred, &sample.gt_offsets));
    }
    Ok(EvalReport::from_errors(
        root.display().to_string(),
        checkpoint_id.to_string(),
        protocol,
        per_sample,
    ))
}

// ---------------------------------------------------------------------------
// external pair lists
// ---------------------------------------------------------------------------

/// One row of a pair-list CSV: `src_path,tar_path,gt_json_path[,tag]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub src_path: PathBuf,
    pub tar_path: PathBuf,
    pub gt_path: PathBuf,
    pub tag: Option<String>,
}

/// Parse a pair-list CSV and verify every referenced file exists.
pub fn load_pair_list(path: &Path) -> Result<Vec<PairRecord>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(EvalError::PairList {
                line: i + 1,
                message: format!("expected 3 or 4 comma-separated fields, got {}", fields.len()),
            });
        }
        let resolve = |f: &str| {
            let p = Path::new(f);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let rec = PairRecord {
            src_path: resolve(fields[0]),
            tar_path: resolve(fields[1]),
            gt_path: resolve(fields[2]),
            tag: fields.get(3).map(|s| s.to_string()),
        };
        for p in [&rec.src_path, &rec.tar_path, &rec.gt_path] {
            if !p.is_file() {
                return Err(EvalError::PairList {
                    line: i + 1,
                    message: format!("missing file {}", p.display()),
                });
            }
        }
        records.push(rec);
    }
    Ok(records)
}

#[derive(Deserialize)]
struct GtOffsetsOnly {
    offsets: FourPointOffsets,
}

/// How off-size pairs are adapted to the estimator's square input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizePolicy {
    /// Center-crop both images to the largest common square with side
    /// divisible by 4; offsets keep their pixel units (default).
    CenterCrop,
    /// Bilinearly resize to the given side and rescale the ground-truth
    /// offsets by the same factor (changes the metric's pixel units).
    Resize(usize),
}

fn prepare_pair(
    src: Image,
    tar: Image,
    gt: FourPointOffsets,
    policy: SizePolicy,
) -> Result<(Image, Image, FourPointOffsets), SynthError> {
    match policy {
        SizePolicy::CenterCrop => {
            let side = src
                .width
                .min(src.height)
                .min(tar.width)
                .min(tar.height)
                / 4
                * 4;
            let crop = |img: &Image| {
                img.crop((img.width - side) / 2, (img.height - side) / 2, side)
            };
            Ok((crop(&src)?, crop(&tar)?, gt))
        }
        SizePolicy::Resize(side) => {
            let factor = side as f64 / tar.width as f64;
            Ok((
                src.resize_bilinear(side, side),
                tar.resize_bilinear(side, side),
                scale_offsets(&gt, factor),
            ))
        }
    }
}

/// Evaluate a predictor over an external pair list.
pub fn evaluate_pairs(
    predictor: &dyn OffsetPredictor,
    pairs: &[PairRecord],
    dataset_id: &str,
    checkpoint_id: &str,
    protocol: Protocol,
    policy: SizePolicy,
) -> Result<EvalReport, EvalError> {
    let mut per_sample = Vec::with_capacity(pairs.len());
    for (index, rec) in pairs.iter().enumerate() {
        let fail = |message: String| EvalError::Dataset { index, message };
        let src = Image::load_png(&rec.src_path)?;
        let tar = Image::load_png(&rec.tar_path)?;
        let gt_bytes = std::fs::read(&rec.gt_path).map_err(io_err(&rec.gt_path))?;
        let gt: GtOffsetsOnly =
            serde_json::from_slice(&gt_bytes).map_err(|e| fail(format!("gt decode: {e}")))?;
        let (src, tar, gt) =
            prepare_pair(src, tar, gt.offsets, policy).map_err(|e| fail(e.to_string()))?;
        let pred = predictor.predict(&src, &tar)?;
        per_sample.push(mace(&pred, &gt));
    }
    Ok(EvalReport::from_errors(
        dataset_id.to_string(),
        checkpoint_id.to_string(),
        protocol,
        per_sample,
    ))
}

// ---------------------------------------------------------------------------
// visualization and comparison
// ---------------------------------------------------------------------------

/// Write the target image with the ground-truth quadrilateral in green and
/// the prediction in red. Vertices are the frame corners displaced by the
/// respective offsets (the ground-truth convention of the synthesis module).
pub fn visualize_pair(
    tar: &Image,
    gt: &FourPointOffsets,
    pred: &FourPointOffsets,
    out: &Path,
) -> Result<(), EvalError> {
    let mut canvas = tar.clone();
    let corners = crate::geometry::CornerSet::square(0.0, 0.0, tar.width as f64);
    let draw = |canvas: &mut Image, o: &FourPointOffsets, color: &[f64; 3]| {
        let quad = corners.displace(o);
        for q in 0..4 {
            let a = (quad.0[q][0], quad.0[q][1]);
            let b = (quad.0[(q + 1) % 4][0], quad.0[(q + 1) % 4][1]);
            canvas.draw_line(a, b, color, 2.0);
        }
    };
    draw(&mut canvas, gt, &[0.0, 1.0, 0.0]);
    draw(&mut canvas, pred, &[1.0, 0.0, 0.0]);
    canvas.save_png(out)?;
    Ok(())
}

/// Visualize the first `limit` samples of a dataset with a predictor;
/// returns the written paths (deterministic names `viz_%06d.png`).
pub fn visualize_dataset(
    predictor: &dyn OffsetPredictor,
    root: &Path,
    out_dir: &Path,
    limit: usize,
) -> Result<Vec<PathBuf>, EvalError> {
    let manifest = read_manifest(root).map_err(|e| EvalError::Dataset {
        index: 0,
        message: e.to_string(),
    })?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    for index in 0..manifest.count.min(limit) {
        let sample: TrainingSample = read_sample(root, index).map_err(|e| EvalError::Dataset {
            index,
            message: e.to_string(),
        })?;
        let pred = predictor.predict(&sample.src_image, &sample.tar_image)?;
        let path = out_dir.join(format!("viz_{index:06}.png"));
        visualize_pair(&sample.tar_image, &sample.gt_offsets, &pred, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Comparison of several reports: rows are (checkpoint, protocol), columns
/// are datasets, cells are mean corner error with the best per column marked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reports: Vec<EvalReport>,
}

impl Comparison {
    pub fn new(reports: Vec<EvalReport>) -> Result<Comparison, EvalError> {
        if reports.is_empty() {
            return Err(EvalError::Report("no reports to compare".into()));
        }
        Ok(Comparison { reports })
    }

    /// Aligned text table. The lowest mean per dataset column is starred.
    pub fn to_text(&self) -> String {
        let mut datasets: Vec<&str> = self.reports.iter().map(|r| r.dataset_id.as_str()).collect();
        datasets.sort();
        datasets.dedup();
        let mut rows: Vec<(String, Vec<Option<f64>>)> = Vec::new();
        for r in &self.reports {
            let label = format!("{} [{}]", r.checkpoint_id, protocol_name(r.protocol));
            let row = rows.iter_mut().find(|(l, _)| *l == label);
            let cells = match row {
                Some((_, cells)) => cells,
                None => {
                    rows.push((label, vec![None; datasets.len()]));
                    &mut rows.last_mut().unwrap().1
                }
            };
            let col = datasets.iter().position(|d| *d == r.dataset_id).unwrap();
            cells[col] = Some(r.mean_mace);
        }
        let best: Vec<Option<f64>> = (0..datasets.len())
            .map(|c| {
                rows.iter()
                    .filter_map(|(_, cells)| cells[c])
                    .min_by(|a, b| a.total_cmp(b))
            })
            .collect();
        let label_w = rows
            .iter()
            .map(|(l, _)| l.len())
            .max()
            .unwrap_or(0)
            .max("checkpoint".len());
        let col_w: Vec<usize> = datasets.iter().map(|d| d.len().max(10)).collect();
        let mut out = format!("{:label_w$}", "checkpoint");
        for (d, w) in datasets.iter().zip(&col_w) {
            out += &format!("  {d:>w$}");
        }
        out.push('\n');
        for (label, cells) in &rows {
            out += &format!("{label:label_w$}");
            for ((cell, w), b) in cells.iter().zip(&col_w).zip(&best) {
                let text = match cell {
                    Some(v) => {
                        let star = if Some(*v) == *b { "*" } else { "" };
                        format!("{v:.3}{star}")
                    }
                    None => "-".to_string(),
                };
                out += &format!("  {text:>w$}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String, EvalError> {
        serde_json::to_string_pretty(self).map_err(|e| EvalError::Report(format!("encode: {e}")))
    }
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::Within => "within",
        Protocol::Cross => "cross",
        Protocol::ZeroShot => "zero-shot",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{
        generate_dataset, sample_dir, IdentityRenderer, ProceduralImages, SynthConfig,
    };

    /// Predicts the recorded ground truth by re-reading it from disk; used
    /// to pin the upper bound of the harness.
    struct GtOracle {
        root: PathBuf,
        next: std::sync::Mutex<usize>,
    }

    impl OffsetPredictor for GtOracle {
        fn predict(&self, _s: &Image, _t: &Image) -> Result<FourPointOffsets, EvalError> {
            let mut guard = self.next.lock().unwrap();
            let sample = read_sample(&self.root, *guard).unwrap();
            *guard += 1;
            Ok(sample.gt_offsets)
        }
    }

    fn make_dataset(dir: &Path, count: usize, p: i32, seed: u64) {
        let cfg = SynthConfig {
            patch_size: 16,
            margin: (2 * p.max(2) as usize + 3) / 4 * 4,
            max_perturbation: p,
            smoothing_bound: 0.0,
            rng_seed: seed,
            ..SynthConfig::default()
        };
        let contents = ProceduralImages::new(seed + 1, 3, 16 + cfg.margin + 8);
        let templates = ProceduralImages::new(seed + 2, 3, 16);
        generate_dataset(dir, count, &cfg, &contents, &templates, &IdentityRenderer, 1).unwrap();
    }

    #[test]
    fn gt_oracle_scores_zero_and_mean_matches() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(dir.path(), 5, 2, 1);
        let oracle = GtOracle {
            root: dir.path().to_path_buf(),
            next: std::sync::Mutex::new(0),
        };
        let report =
            evaluate_dataset(&oracle, dir.path(), "oracle", Protocol::Within).unwrap();
        assert_eq!(report.count, 5);
        assert_eq!(report.mean_mace, 0.0);
        assert_eq!(report.median_mace, 0.0);
        // aggregate invariant
        let mean: f64 = report.per_sample_mace.iter().sum::<f64>() / report.count as f64;
        assert!((report.mean_mace - mean).abs() < 1e-9);
    }

    #[test]
    fn zero_predictor_tracks_enumerated_expectation() {
        // small-p version of the calibration: 400 samples at p=2
        let dir = tempfile::tempdir().unwrap();
        make_dataset(dir.path(), 400, 2, 2);
        let report =
            evaluate_dataset(&ZeroPredictor, dir.path(), "zero", Protocol::Within).unwrap();
        let expect = zero_predictor_expected_mace(2);
        let rel = (report.mean_mace - expect).abs() / expect;
        assert!(rel < 0.10, "mean {} vs expected {expect}", report.mean_mace);
    }

    #[test]
    fn enumeration_oracle_known_values() {
        assert_eq!(zero_predictor_expected_mace(0), 0.0);
        // p=1: 9 cells -> (4*1 + 4*sqrt(2) + 0) / 9
        let expect = (4.0 + 4.0 * 2.0f64.sqrt()) / 9.0;
        assert!((zero_predictor_expected_mace(1) - expect).abs() < 1e-12);
    }

    #[test]
    fn corrupt_sample_is_reported_with_index() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(dir.path(), 3, 2, 3);
        std::fs::remove_file(sample_dir(dir.path(), 1).join("gt.json")).unwrap();
        let err = evaluate_dataset(&ZeroPredictor, dir.path(), "zero", Protocol::Within);
        match err {
            Err(EvalError::Dataset { index: 1, .. }) => {}
            other => panic!("expected dataset error at index 1, got {other:?}"),
        }
    }

    #[test]
    fn report_round_trip_and_comparison() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(dir.path(), 4, 2, 4);
        let report =
            evaluate_dataset(&ZeroPredictor, dir.path(), "ckpt-a", Protocol::ZeroShot).unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), report);

        let mut better = report.clone();
        better.checkpoint_id = "ckpt-b".into();
        better.mean_mace = report.mean_mace / 2.0;
        let cmp = Comparison::new(vec![report.clone(), better.clone()]).unwrap();
        let text = cmp.to_text();
        assert!(text.contains(&format!("{:.3}*", better.mean_mace)), "{text}");
        assert!(!text.contains(&format!("{:.3}*", report.mean_mace)), "{text}");
        let back: Comparison = serde_json::from_str(&cmp.to_json().unwrap()).unwrap();
        assert_eq!(back, cmp);
    }

    #[test]
    fn visualization_marks_quads() {
        let dir = tempfile::tempdir().unwrap();
        let tar = Image::constant(3, 32, 32, 0.5);
        let gt = FourPointOffsets([[10.0, 0.0], [10.0, 0.0], [10.0, 0.0], [10.0, 0.0]]);
        let out = dir.path().join("v.png");
        visualize_pair(&tar, &gt, &FourPointOffsets::ZERO, &out).unwrap();
        let img = Image::load_png(&out).unwrap();
        // red (prediction) quad follows the frame corners: probe the left edge
        let left = (img.get(0, 0, 16), img.get(1, 0, 16), img.get(2, 0, 16));
        assert!(left.0 > 0.9 && left.1 < 0.1 && left.2 < 0.1, "{left:?}");
        // green (gt) quad is shifted 10 px right: probe x = 10 mid-height
        let g = (img.get(0, 10, 16), img.get(1, 10, 16), img.get(2, 10, 16));
        assert!(g.1 > 0.9 && g.0 < 0.1, "{g:?}");
    }

    #[test]
    fn pair_list_loading_and_eval() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(dir.path(), 2, 2, 5);
        let list = dir.path().join("pairs.csv");
        let mut text = String::from("# src, tar, gt\n");
        for i in 0..2 {
            let d = sample_dir(dir.path(), i);
            text += &format!(
                "{},{},{},synthetic\n",
                d.join("src.png").display(),
                d.join("tar.png").display(),
                d.join("gt.json").display()
            );
        }
        std::fs::write(&list, text).unwrap();
        let pairs = load_pair_list(&list).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].tag.as_deref(), Some("synthetic"));

        let report = evaluate_pairs(
            &ZeroPredictor,
            &pairs,
            "pairs",
            "zero",
            Protocol::Cross,
            SizePolicy::CenterCrop,
        )
        .unwrap();
        assert_eq!(report.count, 2);
        // same samples through the dataset path must agree
        let direct =
            evaluate_dataset(&ZeroPredictor, dir.path(), "zero", Protocol::Cross).unwrap();
        assert_eq!(report.per_sample_mace, direct.per_sample_mace);

        // a missing file is a hard error
        std::fs::write(&list, "missing.png,also.png,none.json\n").unwrap();
        assert!(matches!(
            load_pair_list(&list),
            Err(EvalError::PairList { line: 1, .. })
        ));
    }

    #[test]
    fn resize_policy_scales_offsets() {
        let src = Image::constant(3, 32, 32, 0.3);
        let tar = Image::constant(3, 32, 32, 0.7);
        let gt = FourPointOffsets([[4.0, 2.0]; 4]);
        let (s, t, g) = prepare_pair(src, tar, gt, SizePolicy::Resize(16)).unwrap();
        assert_eq!((s.width, t.width), (16, 16));
        assert_eq!(g, FourPointOffsets([[2.0, 1.0]; 4]));
    }
}
