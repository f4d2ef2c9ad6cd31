//! Supervised training: per-sample tapes, sequential gradient accumulation,
//! AdamW with a one-cycle learning-rate schedule and global gradient-norm
//! clipping. Data ordering is stateless — each step derives its sample
//! indices from (seed, step) — so resuming from a checkpoint replays the
//! exact uninterrupted run.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{self as ops, Grads, Tape, Tensor, Var};
use crate::geometry::{mace, FourPointOffsets};
use crate::model::{
    color_histogram, load_checkpoint, save_checkpoint, Ctx, ExtraState, Model, ModelError,
};
use crate::synth::{generate_sample, ImageSource, StyleRenderer, SynthConfig, SynthError};
use crate::synth::{read_manifest, read_sample, TrainingSample};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}; diagnostic state written to {dump}")]
    NonFiniteLoss { step: u64, dump: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iterations: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub loss_weight: f64,
    pub weight_decay: f64,
    pub checkpoint_interval: u64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iterations: 120_000,
            learning_rate: 4e-4,
            batch_size: 16,
            loss_weight: 0.5,
            weight_decay: 1e-4,
            checkpoint_interval: 1000,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.total_iterations < 1 {
            return err("total_iterations must be >= 1");
        }
        if self.batch_size < 1 {
            return err("batch_size must be >= 1");
        }
        if self.loss_weight < 0.0 {
            return err("loss_weight must be >= 0");
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return err("learning_rate must be > 0 and weight_decay >= 0");
        }
        Ok(())
    }
}

/// Per-batch loss components. `total = l_pred + lambda * (l_color + l_dis)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pred: f64,
    pub l_color: f64,
    pub l_dis: f64,
    pub total: f64,
}

// ---------------------------------------------------------------------------
// data sources
// ---------------------------------------------------------------------------

/// Deterministic supplier of training samples by global draw index.
pub trait SampleSource {
    fn sample(&self, index: u64) -> Result<TrainingSample, TrainError>;
}

/// Pre-generated dataset on disk, traversed in per-epoch shuffled order:
/// draw `index` maps to epoch `index / count` whose permutation is seeded by
/// (seed, epoch).
pub struct DiskDataset {
    root: PathBuf,
    count: usize,
    seed: u64,
}

impl DiskDataset {
    pub fn open(root: &Path, seed: u64) -> Result<DiskDataset, TrainError> {
        let manifest = read_manifest(root)?;
        if manifest.count == 0 {
            return Err(TrainError::InvalidConfig(format!(
                "dataset {} is empty",
                root.display()
            )));
        }
        Ok(DiskDataset {
            root: root.to_path_buf(),
            count: manifest.count,
            seed,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    fn position(&self, index: u64) -> usize {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let epoch = index / self.count as u64;
        let pos = (index % self.count as u64) as usize;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch.wrapping_add(1) << 1);
        let mut order: Vec<usize> = (0..self.count).collect();
        order.shuffle(&mut rng);
        order[pos]
    }
}

impl SampleSource for DiskDataset {
    fn sample(&self, index: u64) -> Result<TrainingSample, TrainError> {
        Ok(read_sample(&self.root, self.position(index))?)
    }
}

/// On-the-fly synthesis: draw `index` is the synthesis sample index, so the
/// stream never repeats and is fully reproducible from the config seed.
pub struct StreamingSynth<'a> {
    pub cfg: SynthConfig,
    pub contents: &'a dyn ImageSource,
    pub templates: &'a dyn ImageSource,
    pub renderer: &'a dyn StyleRenderer,
}

impl SampleSource for StreamingSynth<'_> {
    fn sample(&self, index: u64) -> Result<TrainingSample, TrainError> {
        Ok(generate_sample(
            index as usize,
            &self.cfg,
            self.contents,
            self.templates,
            self.renderer,
        )?)
    }
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Sum over all cumulative trace entries of the elementwise L1 distance to
/// the ground truth (8 components per entry).
pub fn offset_loss(ctx: &mut Ctx, trace: &[Var], gt: &FourPointOffsets) -> Var {
    assert!(!trace.is_empty());
    let target = Tensor::new(vec![8], gt.to_flat().to_vec());
    let terms: Vec<Var> = trace
        .iter()
        .map(|&entry| ops::l1_const(ctx.tape, entry, target.clone()))
        .collect();
    ops::add_all(ctx.tape, &terms)
}

/// (sum of color reconstruction MSEs, sum of mean |cosine| penalties) over
/// both images and all three levels.
pub fn decoupling_losses(
    model: &Model,
    ctx: &mut Ctx,
    decoupled: [&crate::model::Decoupled; 2],
    images: [&crate::raster::Image; 2],
) -> (Var, Var) {
    let bins = model.config.histogram_bins;
    let mut color_terms = Vec::with_capacity(6);
    let mut dis_terms = Vec::with_capacity(6);
    for (dec, img) in decoupled.into_iter().zip(images) {
        let hist = color_histogram(img, bins);
        for j in 1..=3 {
            let recon = model.reconstruct_color(ctx, dec.color[j - 1], j);
            color_terms.push(ops::mse_const(ctx.tape, recon, hist.clone()));
            dis_terms.push(ops::abs_cos_mean(ctx.tape, dec.color[j - 1], dec.invar[j - 1]));
        }
    }
    (
        ops::add_all(ctx.tape, &color_terms),
        ops::add_all(ctx.tape, &dis_terms),
    )
}

/// Combine the three components: `total = l_pred + lambda * (l_color + l_dis)`.
pub fn total_loss(ctx: &mut Ctx, l_pred: Var, l_color: Var, l_dis: Var, lambda: f64) -> Var {
    let aux = ops::add(ctx.tape, l_color, l_dis);
    let aux = ops::scale(ctx.tape, aux, lambda);
    ops::add(ctx.tape, l_pred, aux)
}

// ---------------------------------------------------------------------------
// optimizer and schedule
// ---------------------------------------------------------------------------

/// One-cycle schedule: linear warmup over the first tenth of training from
/// a quarter of the peak rate, then cosine decay to 1% of the peak.
pub fn one_cycle_lr(step: u64, total: u64, peak: f64) -> f64 {
    let warmup = (total / 10).max(1);
    if step < warmup {
        let t = step as f64 / warmup as f64;
        peak * (0.25 + 0.75 * t)
    } else {
        let t = (step - warmup) as f64 / (total - warmup).max(1) as f64;
        let floor = 0.01 * peak;
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// AdamW with decoupled weight decay. Normalization gains/biases and all
/// bias vectors are excluded from decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(model: &Model) -> AdamW {
        let shapes: Vec<Vec<usize>> = (0..model.params.len())
            .map(|i| model.params.tensor(i).shape().to_vec())
            .collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Grads, lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in 0..model.params.len() {
            let Some(g) = grads.by_param.get(&id) else {
                continue;
            };
            let decay = if model.params.name(id).ends_with(".w") {
                weight_decay
            } else {
                0.0
            };
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            let p = model.params.tensor_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g.data()[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g.data()[i] * g.data()[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + self.eps) + decay * p[i]);
            }
        }
    }

    fn to_extra(&self, model: &Model) -> ExtraState {
        let mut extra = Vec::with_capacity(2 * self.m.len() + 1);
        extra.push(("adamw.t".into(), Tensor::new(vec![1], vec![self.t as f64])));
        for id in 0..self.m.len() {
            let name = model.params.name(id);
            extra.push((format!("adamw.m.{name}"), self.m[id].clone()));
            extra.push((format!("adamw.v.{name}"), self.v[id].clone()));
        }
        extra
    }

    fn from_extra(model: &Model, extra: &ExtraState) -> Result<AdamW, ModelError> {
        let mut opt = AdamW::new(model);
        let lookup: std::collections::HashMap<&str, &Tensor> =
            extra.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let missing =
            |n: &str| ModelError::CorruptCheckpoint(format!("missing optimizer tensor {n}"));
        opt.t = lookup
            .get("adamw.t")
            .ok_or_else(|| missing("adamw.t"))?
            .data()[0] as u64;
        for id in 0..model.params.len() {
            let name = model.params.name(id);
            for (slot, key) in [(&mut opt.m, "m"), (&mut opt.v, "v")] {
                let full = format!("adamw.{key}.{name}");
                let t = lookup.get(full.as_str()).ok_or_else(|| missing(&full))?;
                if t.shape() != model.params.tensor(id).shape() {
                    return Err(ModelError::CorruptCheckpoint(format!(
                        "optimizer tensor {full} has wrong shape"
                    )));
                }
                slot[id] = (*t).clone();
            }
        }
        Ok(opt)
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(rename = "L_pred")]
    pub l_pred: f64,
    #[serde(rename = "L_color")]
    pub l_color: f64,
    #[serde(rename = "L_dis")]
    pub l_dis: f64,
    pub total: f64,
    pub train_mace: f64,
    pub lr: f64,
}

pub struct TrainReport {
    pub final_step: u64,
    pub last_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub final_metrics: Option<StepMetrics>,
}

/// One optimizer step over `batch_size` samples drawn at indices
/// `step * batch_size ..`. Returns the averaged loss breakdown, train MACE,
/// and the accumulated (already averaged) gradients.
fn run_batch(
    model: &Model,
    source: &dyn SampleSource,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(LossBreakdown, f64, Grads), TrainError> {
    let mut grads = Grads::default();
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    let mut mace_sum = 0.0;
    for k in 0..cfg.batch_size as u64 {
        let sample = source.sample(step * cfg.batch_size as u64 + k)?;
        let mut tape = Tape::new();
        let mut ctx = model.ctx(&mut tape);
        let pass = model.forward_pair(&mut ctx, &sample.src_image, &sample.tar_image, true)?;
        let l_pred = offset_loss(&mut ctx, &pass.trace, &sample.gt_offsets);
        let (l_color, l_dis) = decoupling_losses(
            model,
            &mut ctx,
            [&pass.decoupled_src, &pass.decoupled_tar],
            [&sample.src_image, &sample.tar_image],
        );
        let total = total_loss(&mut ctx, l_pred, l_color, l_dis, cfg.loss_weight);
        drop(ctx);
        let final_pred = FourPointOffsets::from_flat(
            tape.value(*pass.trace.last().expect("non-empty trace")).data(),
        );
        mace_sum += mace(&final_pred, &sample.gt_offsets);
        sums.0 += tape.value(l_pred).item();
        sums.1 += tape.value(l_color).item();
        sums.2 += tape.value(l_dis).item();
        sums.3 += tape.value(total).item();
        grads.accumulate(&tape.backward(total));
    }
    let n = cfg.batch_size as f64;
    grads.scale(1.0 / n);
    Ok((
        LossBreakdown {
            l_pred: sums.0 / n,
            l_color: sums.1 / n,
            l_dis: sums.2 / n,
            total: sums.3 / n,
        },
        mace_sum / n,
        grads,
    ))
}

fn run_loop(
    model: &mut Model,
    opt: &mut AdamW,
    source: &dyn SampleSource,
    cfg: &TrainConfig,
    out_dir: &Path,
    start_step: u64,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let ckpt_path = |step: u64| out_dir.join(format!("ckpt-{step:08}.bin"));
    let mut last_checkpoint = ckpt_path(start_step);
    if start_step == 0 || !last_checkpoint.exists() {
        save_checkpoint(model, start_step, cfg.rng_seed, &opt.to_extra(model), &last_checkpoint)?;
    }

    let mut final_metrics = None;
    for step in start_step..cfg.total_iterations {
        let lr = one_cycle_lr(step, cfg.total_iterations, cfg.learning_rate);
        let (loss, train_mace, mut grads) = run_batch(model, source, cfg, step)?;
        if !loss.total.is_finite() {
            let dump = out_dir.join("diverged.bin");
            save_checkpoint(model, step, cfg.rng_seed, &opt.to_extra(model), &dump)?;
            return Err(TrainError::NonFiniteLoss {
                step,
                dump: dump.display().to_string(),
            });
        }
        let norm = grads.global_norm();
        if norm > 1.0 {
            grads.scale(1.0 / norm);
        }
        opt.step(model, &grads, lr, cfg.weight_decay);

        let metrics = StepMetrics {
            step,
            l_pred: loss.l_pred,
            l_color: loss.l_color,
            l_dis: loss.l_dis,
            total: loss.total,
            train_mace,
            lr,
        };
        let line = serde_json::to_string(&metrics)
            .map_err(|e| TrainError::InvalidConfig(format!("metrics encode: {e}")))?;
        writeln!(metrics_file, "{line}").map_err(io_err(&metrics_path))?;

        let done = step + 1;
        if done % cfg.checkpoint_interval == 0 || done == cfg.total_iterations {
            last_checkpoint = ckpt_path(done);
            save_checkpoint(model, done, cfg.rng_seed, &opt.to_extra(model), &last_checkpoint)?;
        }
        final_metrics = Some(metrics);
    }
    Ok(TrainReport {
        final_step: cfg.total_iterations,
        last_checkpoint,
        metrics_path,
        final_metrics,
    })
}

/// Train a fresh or caller-initialized model from step 0.
pub fn train(
    model: &mut Model,
    source: &dyn SampleSource,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport, TrainError> {
    let mut opt = AdamW::new(model);
    run_loop(model, &mut opt, source, cfg, out_dir, 0)
}

/// Continue training from a checkpoint; replays the uninterrupted run
/// exactly because data order is a pure function of (seed, step).
pub fn resume(
    checkpoint: &Path,
    source: &dyn SampleSource,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(Model, TrainReport), TrainError> {
    let ck = load_checkpoint(checkpoint)?;
    let mut model = ck.model;
    let mut opt = AdamW::from_extra(&model, &ck.extra)?;
    let report = run_loop(&mut model, &mut opt, source, cfg, out_dir, ck.step)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{IdentityRenderer, ProceduralImages, ProceduralStyler};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> Model {
        Model::new(
            ModelConfig {
                base_channels: 8,
                mid_channels: 12,
                deep_channels: 16,
                inner_iterations: 1,
                search_radius: 1,
                histogram_bins: 8,
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_source() -> StreamingSynth<'static> {
        static CONTENTS: std::sync::OnceLock<ProceduralImages> = std::sync::OnceLock::new();
        static TEMPLATES: std::sync::OnceLock<ProceduralImages> = std::sync::OnceLock::new();
        static STYLER: std::sync::OnceLock<ProceduralStyler> = std::sync::OnceLock::new();
        StreamingSynth {
            cfg: SynthConfig {
                patch_size: 16,
                margin: 8,
                max_perturbation: 2,
                smoothing_bound: 0.0,
                rng_seed: 3,
                ..SynthConfig::default()
            },
            contents: CONTENTS.get_or_init(|| ProceduralImages::new(1, 4, 32)),
            templates: TEMPLATES.get_or_init(|| ProceduralImages::new(2, 4, 16)),
            renderer: STYLER.get_or_init(|| ProceduralStyler::new(9)),
        }
    }

    fn tiny_cfg(iters: u64) -> TrainConfig {
        TrainConfig {
            total_iterations: iters,
            learning_rate: 1e-3,
            batch_size: 2,
            checkpoint_interval: 5,
            rng_seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn offset_loss_oracles() {
        let model = tiny_model(0);
        let gt = FourPointOffsets([[1.0, -2.0], [0.5, 0.0], [3.0, 1.0], [-1.0, 2.0]]);
        let mut tape = Tape::new();
        let mut ctx = model.ctx(&mut tape);
        // trace entries equal to gt -> zero loss
        let exact = ctx.tape.constant(Tensor::new(vec![8], gt.to_flat().to_vec()));
        let zero = offset_loss(&mut ctx, &[exact, exact], &gt);
        // one entry off by +1 everywhere -> 8
        let off = ctx.tape.constant(Tensor::new(
            vec![8],
            gt.to_flat().iter().map(|v| v + 1.0).collect(),
        ));
        let eight = offset_loss(&mut ctx, &[off], &gt);
        // random trace matches flat recomputation
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
        let vars: Vec<Var> = vals
            .iter()
            .map(|v| ctx.tape.constant(Tensor::new(vec![8], v.clone())))
            .collect();
        let loss = offset_loss(&mut ctx, &vars, &gt);
        let expect: f64 = vals
            .iter()
            .flat_map(|v| v.iter().zip(gt.to_flat()).map(|(a, b)| (a - b).abs()))
            .sum();
        drop(ctx);
        assert_eq!(tape.value(zero).item(), 0.0);
        assert!((tape.value(eight).item() - 8.0).abs() < 1e-12);
        assert!((tape.value(loss).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn loss_decomposition_invariant() {
        let model = tiny_model(2);
        let source = tiny_source();
        let cfg = tiny_cfg(1);
        let (loss, _, _) = run_batch(&model, &source, &cfg, 0).unwrap();
        let recomposed = loss.l_pred + cfg.loss_weight * (loss.l_color + loss.l_dis);
        assert!((loss.total - recomposed).abs() < 1e-6);
        assert!(loss.l_pred >= 0.0 && loss.l_color >= 0.0 && loss.l_dis >= 0.0);

        // lambda = 0 -> total equals the offset term alone
        let mut cfg0 = cfg.clone();
        cfg0.loss_weight = 0.0;
        let (l0, _, _) = run_batch(&model, &source, &cfg0, 0).unwrap();
        assert!((l0.total - l0.l_pred).abs() < 1e-12);
    }

    #[test]
    fn gradients_reach_every_parameter_group() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(4);
        let source = tiny_source();
        let cfg = tiny_cfg(10);
        train(&mut model, &source, &cfg, dir.path()).unwrap();
        let (_, _, grads) = run_batch(&model, &source, &cfg, 10).unwrap();
        for id in 0..model.params.len() {
            let g = grads
                .by_param
                .get(&id)
                .unwrap_or_else(|| panic!("no gradient for {}", model.params.name(id)));
            assert!(
                g.data().iter().any(|v| *v != 0.0),
                "all-zero gradient for {}",
                model.params.name(id)
            );
        }
    }

    #[test]
    fn seeded_runs_reproduce_losses() {
        let source = tiny_source();
        let cfg = tiny_cfg(3);
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let mut model = tiny_model(5);
            let report = train(&mut model, &source, &cfg, dir.path()).unwrap();
            report.final_metrics.unwrap().total
        };
        let (a, b) = (run(), run());
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn resume_replays_uninterrupted_run() {
        let source = tiny_source();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();

        // uninterrupted: 10 steps (checkpoint_interval 5 leaves a mid-run
        // checkpoint behind)
        let mut model = tiny_model(6);
        let full = train(&mut model, &source, &tiny_cfg(10), dir_a.path()).unwrap();

        // resume steps 5..10 from the mid-run checkpoint in a fresh directory
        let (resumed, cont) = resume(
            &dir_a.path().join("ckpt-00000005.bin"),
            &source,
            &tiny_cfg(10),
            dir_b.path(),
        )
        .unwrap();

        let fa = full.final_metrics.unwrap();
        let fb = cont.final_metrics.unwrap();
        assert_eq!(fa.step, fb.step);
        assert!((fa.total - fb.total).abs() < 1e-5, "{} vs {}", fa.total, fb.total);
        for id in 0..model.params.len() {
            let pa = model.params.tensor(id).data();
            let pb = resumed.params.tensor(id).data();
            let close = pa
                .iter()
                .zip(pb)
                .all(|(x, y)| (x - y).abs() < 1e-7);
            assert!(close, "parameter {} diverged after resume", model.params.name(id));
        }

        // resuming with zero remaining steps changes nothing
        let (same, _) =
            resume(&cont.last_checkpoint, &source, &tiny_cfg(10), dir_b.path()).unwrap();
        for id in 0..resumed.params.len() {
            assert_eq!(
                same.params.tensor(id).data(),
                resumed.params.tensor(id).data()
            );
        }
    }

    #[test]
    fn disk_dataset_orders_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let contents = ProceduralImages::new(1, 2, 48);
        let templates = ProceduralImages::new(2, 2, 24);
        let cfg = SynthConfig {
            patch_size: 16,
            margin: 8,
            max_perturbation: 2,
            smoothing_bound: 0.0,
            ..SynthConfig::default()
        };
        crate::synth::generate_dataset(
            dir.path(),
            4,
            &cfg,
            &contents,
            &templates,
            &IdentityRenderer,
            1,
        )
        .unwrap();
        let ds = DiskDataset::open(dir.path(), 11).unwrap();
        // one epoch covers every sample exactly once
        let mut seen: Vec<usize> = (0..4).map(|i| ds.position(i)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        // deterministic across instances
        let ds2 = DiskDataset::open(dir.path(), 11).unwrap();
        for i in 0..8 {
            assert_eq!(ds.position(i), ds2.position(i));
            assert_eq!(ds.sample(i).unwrap(), ds2.sample(i).unwrap());
        }
        // different epochs shuffle differently (with overwhelming probability
        // for this seed; fixed here, so deterministic in the test)
        let e0: Vec<usize> = (0..4).map(|i| ds.position(i)).collect();
        let e1: Vec<usize> = (4..8).map(|i| ds.position(i)).collect();
        assert_ne!(e0, e1);
    }

    #[test]
    fn one_cycle_shape() {
        let total = 1000;
        let peak = 4e-4;
        let warm = one_cycle_lr(0, total, peak);
        let at_peak = one_cycle_lr(total / 10, total, peak);
        let end = one_cycle_lr(total - 1, total, peak);
        assert!(warm < at_peak);
        assert!((at_peak - peak).abs() < 1e-12);
        assert!(end < 0.02 * peak);
        for s in 0..total {
            let lr = one_cycle_lr(s, total, peak);
            assert!(lr > 0.0 && lr <= peak + 1e-15);
        }
    }
}
