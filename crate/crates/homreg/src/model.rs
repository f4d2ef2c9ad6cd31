//! The cross-scale color-invariant correlation estimator.
//!
//! A shared convolutional extractor builds a three-level feature pyramid per
//! image (full, half, quarter resolution). Per level, two parallel heads
//! split each feature map into a color representation and a color-invariant
//! representation. Estimation runs coarse-to-fine: at each level the source's
//! invariant features are warped by the current cumulative offsets, locally
//! correlated with the target's, and a small convolutional head predicts a
//! residual four-point offset update. All offsets are expressed at full
//! resolution.

use std::f64::consts::PI;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{self as ops, Tape, Tensor, Var};
use crate::geometry::{FourPointOffsets, GeometryError};
use crate::raster::Image;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint io error at {path}: {source}")]
    CheckpointIo {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u32, got: u32 },
}

/// Network hyperparameters. Three scales are fixed; channel widths for the
/// half- and quarter-resolution levels are explicit so small configurations
/// stay proportionate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub mid_channels: usize,
    pub deep_channels: usize,
    pub inner_iterations: usize,
    pub search_radius: usize,
    pub histogram_bins: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 64,
            mid_channels: 96,
            deep_channels: 128,
            inner_iterations: 2,
            search_radius: 4,
            histogram_bins: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::InvalidConfig(m));
        if self.base_channels < 8 {
            return err("base_channels must be >= 8".into());
        }
        if self.mid_channels < self.base_channels || self.deep_channels < self.mid_channels {
            return err("channel widths must be non-decreasing with depth".into());
        }
        if self.inner_iterations < 1 {
            return err("inner_iterations must be >= 1".into());
        }
        if self.histogram_bins < 8 {
            return err("histogram_bins must be >= 8".into());
        }
        Ok(())
    }

}

/// Per-channel normalized color histogram over `bins` uniform intervals of
/// [0, 1], concatenated across the three channels. Each channel block sums
/// to 1, so the whole vector sums to 3.
pub fn color_histogram(image: &Image, bins: usize) -> Tensor {
    assert!(bins > 0);
    assert_eq!(image.channels, 3);
    let n = image.height * image.width;
    let mut hist = vec![0.0f64; 3 * bins];
    for c in 0..3 {
        for i in 0..n {
            let v = image.data[c * n + i].clamp(0.0, 1.0);
            let b = ((v * bins as f64) as usize).min(bins - 1);
            hist[c * bins + b] += 1.0;
        }
        for h in &mut hist[c * bins..(c + 1) * bins] {
            *h /= n as f64;
        }
    }
    Tensor::new(vec![3 * bins], hist)
}

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

struct ParamEntry {
    name: String,
    tensor: Tensor,
}

/// Flat registry of all trainable tensors, addressed by creation-order id.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    fn add(&mut self, name: String, tensor: Tensor) -> usize {
        self.entries.push(ParamEntry { name, tensor });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

/// One forward pass: a tape plus lazily registered parameter leaves.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    cache: Vec<Option<Var>>,
}

impl Ctx<'_> {
    fn p(&mut self, id: usize) -> Var {
        if let Some(v) = self.cache[id] {
            return v;
        }
        let v = self.tape.param(self.store.tensor(id).clone(), id);
        self.cache[id] = Some(v);
        v
    }

    pub fn constant_image(&mut self, image: &Image) -> Var {
        self.tape.constant(Tensor::new(
            vec![image.channels, image.height, image.width],
            image.data.clone(),
        ))
    }
}

fn box_muller(rng: &mut (impl RngCore + ?Sized)) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl RngCore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
    ) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let n = cout * cin * k * k;
        let data: Vec<f64> = (0..n)
            .map(|_| if zero_init { 0.0 } else { std * box_muller(rng) })
            .collect();
        let w = store.add(format!("{name}.w"), Tensor::new(vec![cout, cin, k, k], data));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![cout]));
        Conv { w, b, stride, pad }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        ops::conv2d(ctx.tape, x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Norm {
        let g = store.add(
            format!("{name}.gamma"),
            Tensor::new(vec![c], vec![1.0; c]),
        );
        let b = store.add(format!("{name}.beta"), Tensor::zeros(vec![c]));
        Norm { g, b }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.p(self.g);
        let b = ctx.p(self.b);
        ops::instance_norm(ctx.tape, x, g, b)
    }
}

/// Two 3x3 convolutions with instance norm; 1x1 projection on the skip path
/// when the channel count or stride changes.
#[derive(Clone, Copy)]
struct ResBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl RngCore,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> ResBlock {
        let conv1 = Conv::new(
            store,
            rng,
            &format!("{name}.conv1"),
            cin,
            cout,
            3,
            stride,
            1,
            false,
        );
        let norm1 = Norm::new(store, &format!("{name}.norm1"), cout);
        let conv2 = Conv::new(
            store,
            rng,
            &format!("{name}.conv2"),
            cout,
            cout,
            3,
            1,
            1,
            false,
        );
        let norm2 = Norm::new(store, &format!("{name}.norm2"), cout);
        let skip = (cin != cout || stride != 1).then(|| {
            Conv::new(
                store,
                rng,
                &format!("{name}.skip"),
                cin,
                cout,
                1,
                stride,
                0,
                false,
            )
        });
        ResBlock {
            conv1,
            norm1,
            conv2,
            norm2,
            skip,
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let mut y = self.conv1.forward(ctx, x);
        y = self.norm1.forward(ctx, y);
        y = ops::relu(ctx.tape, y);
        y = self.conv2.forward(ctx, y);
        y = self.norm2.forward(ctx, y);
        let s = match &self.skip {
            Some(conv) => conv.forward(ctx, x),
            None => x,
        };
        let sum = ops::add(ctx.tape, y, s);
        ops::relu(ctx.tape, sum)
    }
}

struct Extractor {
    stem: Conv,
    stem_res: ResBlock,
    down2: ResBlock,
    merge2: ResBlock,
    down3: ResBlock,
    merge3: ResBlock,
    fuse2: Conv,
    fuse1: Conv,
}

/// Color/invariant split: two parallel conv-relu-conv heads per level.
struct DecoupleHead {
    color1: Conv,
    color2: Conv,
    invar1: Conv,
    invar2: Conv,
}

/// Histogram reconstruction head: GAP then a two-layer perceptron to
/// per-channel histogram logits.
struct ColorNet {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    hidden: usize,
}

impl ColorNet {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl RngCore,
        name: &str,
        cin: usize,
        bins: usize,
    ) -> ColorNet {
        let hidden = 2 * cin;
        let lin = |store: &mut ParamStore, rng: &mut dyn RngCore, n: &str, i: usize, o: usize| {
            let std = (2.0 / i as f64).sqrt();
            let data: Vec<f64> = (0..o * i).map(|_| std * box_muller(rng)).collect();
            let w = store.add(format!("{n}.w"), Tensor::new(vec![o, i], data));
            let b = store.add(format!("{n}.b"), Tensor::zeros(vec![o]));
            (w, b)
        };
        let (w1, b1) = lin(store, rng, &format!("{name}.fc1"), cin, hidden);
        let (w2, b2) = lin(store, rng, &format!("{name}.fc2"), hidden, 3 * bins);
        ColorNet {
            w1,
            b1,
            w2,
            b2,
            hidden,
        }
    }
}

/// Residual offset head: two strided convolutions, GAP, and a
/// zero-initialized linear layer to 8 offset components.
struct OffsetNet {
    conv1: Conv,
    conv2: Conv,
    lin_w: usize,
    lin_b: usize,
}

impl OffsetNet {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl RngCore,
        name: &str,
        cin: usize,
        c1: usize,
        c2: usize,
    ) -> OffsetNet {
        let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), cin, c1, 3, 2, 1, false);
        let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), c1, c2, 3, 2, 1, false);
        let lin_w = store.add(format!("{name}.fc.w"), Tensor::zeros(vec![8, c2]));
        let lin_b = store.add(format!("{name}.fc.b"), Tensor::zeros(vec![8]));
        OffsetNet {
            conv1,
            conv2,
            lin_w,
            lin_b,
        }
    }
}

struct Arch {
    extractor: Extractor,
    heads: [DecoupleHead; 3],
    color_nets: [ColorNet; 3],
    offset_nets: [OffsetNet; 3],
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

/// Feature pyramid levels for one image, finest first.
pub struct Pyramid {
    pub levels: [Var; 3],
}

/// Per-level (color, invariant) split for one image, finest first.
pub struct Decoupled {
    pub color: [Var; 3],
    pub invar: [Var; 3],
}

/// Ordered cumulative offset estimates: K entries per level for levels
/// 3, 2, 1, each expressed at full resolution. The last entry is the final
/// prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimationTrace {
    pub entries: Vec<FourPointOffsets>,
}

impl EstimationTrace {
    pub fn final_offsets(&self) -> FourPointOffsets {
        *self.entries.last().expect("trace is never empty")
    }
}

/// Tape handles produced by a full forward pass.
pub struct ForwardPass {
    /// Cumulative offsets, one Var of 8 values per trace entry.
    pub trace: Vec<Var>,
    /// Residual updates aligned with `trace` (trace[i] = trace[i-1] + residuals[i]
    /// within a level).
    pub residuals: Vec<Var>,
    pub decoupled_src: Decoupled,
    pub decoupled_tar: Decoupled,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    arch: Arch,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2, c3) = (
            config.base_channels,
            config.mid_channels,
            config.deep_channels,
        );
        let s = &mut store;
        let r = &mut rng;
        let extractor = Extractor {
            stem: Conv::new(s, r, "extractor.stem", 3, c1, 3, 1, 1, false),
            stem_res: ResBlock::new(s, r, "extractor.res1", c1, c1, 1),
            down2: ResBlock::new(s, r, "extractor.down2", c1, c2, 2),
            merge2: ResBlock::new(s, r, "extractor.merge2", c2 + c1, c2, 1),
            down3: ResBlock::new(s, r, "extractor.down3", c2, c3, 2),
            merge3: ResBlock::new(s, r, "extractor.merge3", c3 + c2, c3, 1),
            fuse2: Conv::new(s, r, "extractor.fuse2", c2 + c3, c2, 3, 1, 1, false),
            fuse1: Conv::new(s, r, "extractor.fuse1", c1 + c2, c1, 3, 1, 1, false),
        };
        let head = |s: &mut ParamStore, r: &mut ChaCha8Rng, j: usize, c: usize| DecoupleHead {
            color1: Conv::new(s, r, &format!("decouple{j}.color1"), c, c, 3, 1, 1, false),
            color2: Conv::new(s, r, &format!("decouple{j}.color2"), c, c, 3, 1, 1, false),
            invar1: Conv::new(s, r, &format!("decouple{j}.invar1"), c, c, 3, 1, 1, false),
            invar2: Conv::new(s, r, &format!("decouple{j}.invar2"), c, c, 3, 1, 1, false),
        };
        let heads = [head(s, r, 1, c1), head(s, r, 2, c2), head(s, r, 3, c3)];
        let bins = config.histogram_bins;
        let color_nets = [
            ColorNet::new(s, r, "colornet1", c1, bins),
            ColorNet::new(s, r, "colornet2", c2, bins),
            ColorNet::new(s, r, "colornet3", c3, bins),
        ];
        let corr_c = {
            let d = 2 * config.search_radius + 1;
            d * d
        };
        let offset_nets = [
            OffsetNet::new(s, r, "offsetnet1", corr_c, c1, c2),
            OffsetNet::new(s, r, "offsetnet2", corr_c, c1, c2),
            OffsetNet::new(s, r, "offsetnet3", corr_c, c1, c2),
        ];
        Ok(Model {
            config,
            params: store,
            arch: Arch {
                extractor,
                heads,
                color_nets,
                offset_nets,
            },
        })
    }

    pub fn ctx<'a>(&'a self, tape: &'a mut Tape) -> Ctx<'a> {
        Ctx {
            tape,
            store: &self.params,
            cache: vec![None; self.params.len()],
        }
    }

    fn check_input(&self, image: &Image) -> Result<(), ModelError> {
        if image.channels != 3 {
            return Err(ModelError::Shape(format!(
                "expected 3 channels, got {}",
                image.channels
            )));
        }
        if image.height != image.width || image.width % 4 != 0 {
            return Err(ModelError::Shape(format!(
                "input must be square with side divisible by 4, got {}x{}",
                image.width, image.height
            )));
        }
        Ok(())
    }

    /// Three-level pyramid: top-to-bottom downsampling then bottom-to-top
    /// fusion.
    pub fn extract_pyramid(&self, ctx: &mut Ctx, image: Var) -> Result<Pyramid, ModelError> {
        let shape = ctx.tape.value(image).shape().to_vec();
        if shape.len() != 3 || shape[1] % 4 != 0 || shape[2] % 4 != 0 {
            return Err(ModelError::Shape(format!(
                "pyramid input must be CxHxW with H, W divisible by 4, got {shape:?}"
            )));
        }
        let e = &self.arch.extractor;
        let stem = e.stem.forward(ctx, image);
        let stem = ops::relu(ctx.tape, stem);
        let f1 = e.stem_res.forward(ctx, stem);

        let d2 = e.down2.forward(ctx, f1);
        let p2 = ops::maxpool2(ctx.tape, f1);
        let cat2 = ops::concat_c(ctx.tape, d2, p2);
        let f2 = e.merge2.forward(ctx, cat2);

        let d3 = e.down3.forward(ctx, f2);
        let p3 = ops::maxpool2(ctx.tape, f2);
        let cat3 = ops::concat_c(ctx.tape, d3, p3);
        let f3 = e.merge3.forward(ctx, cat3);

        let up3 = ops::upsample_nearest2(ctx.tape, f3);
        let cat = ops::concat_c(ctx.tape, f2, up3);
        let f2 = e.fuse2.forward(ctx, cat);

        let up2 = ops::upsample_nearest2(ctx.tape, f2);
        let cat = ops::concat_c(ctx.tape, f1, up2);
        let f1 = e.fuse1.forward(ctx, cat);

        Ok(Pyramid {
            levels: [f1, f2, f3],
        })
    }

    /// Split every pyramid level into color and color-invariant maps.
    pub fn decouple_color(&self, ctx: &mut Ctx, pyramid: &Pyramid) -> Decoupled {
        let mut color = [pyramid.levels[0]; 3];
        let mut invar = [pyramid.levels[0]; 3];
        for j in 0..3 {
            let h = &self.arch.heads[j];
            let f = pyramid.levels[j];
            let mut c = h.color1.forward(ctx, f);
            // The color branch only receives gradient through the small
            // histogram loss; a plain ReLU can silence it permanently if the
            // activations die early in training, so keep a leaky slope.
            c = ops::leaky_relu(ctx.tape, c, 0.1);
            color[j] = h.color2.forward(ctx, c);
            let mut v = h.invar1.forward(ctx, f);
            v = ops::relu(ctx.tape, v);
            invar[j] = h.invar2.forward(ctx, v);
        }
        Decoupled { color, invar }
    }

    /// Reconstruct a per-channel histogram distribution from a color feature
    /// map of level `j` (1-based).
    pub fn reconstruct_color(&self, ctx: &mut Ctx, f_color: Var, j: usize) -> Var {
        let net = &self.arch.color_nets[j - 1];
        let pooled = ops::global_avg_pool(ctx.tape, f_color);
        let w1 = ctx.p(net.w1);
        let b1 = ctx.p(net.b1);
        let mut y = ops::linear(ctx.tape, pooled, w1, b1);
        debug_assert_eq!(ctx.tape.value(y).numel(), net.hidden);
        // Leaky so the hidden units of this tiny head cannot die; see
        // decouple_color for the same reasoning.
        y = ops::leaky_relu(ctx.tape, y, 0.1);
        let w2 = ctx.p(net.w2);
        let b2 = ctx.p(net.b2);
        y = ops::linear(ctx.tape, y, w2, b2);
        ops::block_softmax(ctx.tape, y, self.config.histogram_bins)
    }

    /// Residual offsets from a correlation volume at level `j` (1-based),
    /// scaled up to full resolution.
    pub fn predict_residual(&self, ctx: &mut Ctx, volume: Var, j: usize) -> Var {
        let net = &self.arch.offset_nets[j - 1];
        let mut y = net.conv1.forward(ctx, volume);
        y = ops::relu(ctx.tape, y);
        y = net.conv2.forward(ctx, y);
        y = ops::relu(ctx.tape, y);
        y = ops::global_avg_pool(ctx.tape, y);
        let w = ctx.p(net.lin_w);
        let b = ctx.p(net.lin_b);
        y = ops::linear(ctx.tape, y, w, b);
        ops::scale(ctx.tape, y, (1 << (j - 1)) as f64)
    }

    /// Full differentiable forward pass over one image pair. With
    /// `with_color` the color split and heads needed for the decoupling
    /// losses are recorded too; otherwise only the invariant path runs.
    pub fn forward_pair(
        &self,
        ctx: &mut Ctx,
        src: &Image,
        tar: &Image,
        with_color: bool,
    ) -> Result<ForwardPass, ModelError> {
        self.check_input(src)?;
        self.check_input(tar)?;
        if src.width != tar.width {
            return Err(ModelError::Shape(format!(
                "source and target sizes differ: {} vs {}",
                src.width, tar.width
            )));
        }
        let src_var = ctx.constant_image(src);
        let tar_var = ctx.constant_image(tar);
        let pyr_src = self.extract_pyramid(ctx, src_var)?;
        let pyr_tar = self.extract_pyramid(ctx, tar_var)?;
        let dec_src = self.decouple_color(ctx, &pyr_src);
        let dec_tar = self.decouple_color(ctx, &pyr_tar);
        let _ = with_color; // the color maps above are cheap; heads run in the loss

        let k = self.config.inner_iterations;
        let r = self.config.search_radius;
        let mut trace = Vec::with_capacity(3 * k);
        let mut residuals = Vec::with_capacity(3 * k);
        // cumulative offsets at full resolution; zero before the coarsest level
        let mut cumulative = ctx.tape.constant(Tensor::zeros(vec![8]));
        for j in (1..=3usize).rev() {
            let f_src = dec_src.invar[j - 1];
            let f_tar = dec_tar.invar[j - 1];
            for _ in 0..k {
                let scaled = ops::scale(ctx.tape, cumulative, 1.0 / (1 << (j - 1)) as f64);
                let warped = ops::warp_offsets(ctx.tape, f_src, scaled)?;
                let volume = ops::local_correlation(ctx.tape, warped, f_tar, r);
                let residual = self.predict_residual(ctx, volume, j);
                cumulative = ops::add(ctx.tape, cumulative, residual);
                residuals.push(residual);
                trace.push(cumulative);
            }
        }
        Ok(ForwardPass {
            trace,
            residuals,
            decoupled_src: dec_src,
            decoupled_tar: dec_tar,
        })
    }

    /// Inference: run the estimator and return the offset trace as plain data.
    pub fn estimate(&self, src: &Image, tar: &Image) -> Result<EstimationTrace, ModelError> {
        let mut tape = Tape::new();
        let mut ctx = self.ctx(&mut tape);
        let pass = self.forward_pair(&mut ctx, src, tar, false)?;
        let entries = pass
            .trace
            .iter()
            .map(|&v| FourPointOffsets::from_flat(tape.value(v).data()))
            .collect();
        Ok(EstimationTrace { entries })
    }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"HOMREGCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    seed: u64,
    step: u64,
    params: Vec<(String, Vec<usize>)>,
    /// Extra tensors (e.g. optimizer state) keyed by name.
    extra: Vec<(String, Vec<usize>)>,
}

/// Extra named tensors stored alongside the parameters (optimizer state).
pub type ExtraState = Vec<(String, Tensor)>;

pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub seed: u64,
    pub extra: ExtraState,
}

/// Serialize the model (and optional extra tensors) to `path` atomically:
/// magic, version, JSON header, raw little-endian f64 blob, SHA-256 trailer.
pub fn save_checkpoint(
    model: &Model,
    step: u64,
    seed: u64,
    extra: &ExtraState,
    path: &Path,
) -> Result<(), ModelError> {
    let io = |source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    };
    let header = CheckpointHeader {
        config: model.config.clone(),
        seed,
        step,
        params: (0..model.params.len())
            .map(|i| {
                (
                    model.params.name(i).to_string(),
                    model.params.tensor(i).shape().to_vec(),
                )
            })
            .collect(),
        extra: extra
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| ModelError::CorruptCheckpoint(format!("header encode: {e}")))?;

    let mut body = Vec::new();
    body.extend_from_slice(CHECKPOINT_MAGIC);
    body.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    body.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    body.extend_from_slice(&header_json);
    for i in 0..model.params.len() {
        for v in model.params.tensor(i).data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (_, t) in extra {
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&body);

    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&body).map_err(io)?;
        f.write_all(&digest).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let io = |source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    };
    let corrupt = |m: String| ModelError::CorruptCheckpoint(m);
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io)?
        .read_to_end(&mut bytes)
        .map_err(io)?;
    if bytes.len() < 8 + 4 + 8 + 32 {
        return Err(corrupt("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(corrupt("checksum mismatch".into()));
    }
    if &body[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            got: version,
        });
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    if 20 + header_len > body.len() {
        return Err(corrupt("header length out of range".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[20..20 + header_len])
        .map_err(|e| corrupt(format!("header decode: {e}")))?;

    let mut model = Model::new(header.config, header.seed)?;
    if header.params.len() != model.params.len() {
        return Err(corrupt(format!(
            "parameter count mismatch: file has {}, config implies {}",
            header.params.len(),
            model.params.len()
        )));
    }
    let mut cursor = 20 + header_len;
    let mut take = |shape: &[usize], bytes: &[u8]| -> Result<Tensor, ModelError> {
        let n: usize = shape.iter().product();
        let end = cursor + 8 * n;
        if end > bytes.len() {
            return Err(corrupt("truncated tensor data".into()));
        }
        let data: Vec<f64> = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor = end;
        Ok(Tensor::new(shape.to_vec(), data))
    };
    for (i, (name, shape)) in header.params.iter().enumerate() {
        if model.params.name(i) != name || model.params.tensor(i).shape() != shape.as_slice() {
            return Err(corrupt(format!(
                "parameter {i} mismatch: file has {name} {shape:?}, config implies {} {:?}",
                model.params.name(i),
                model.params.tensor(i).shape()
            )));
        }
        *model.params.tensor_mut(i) = take(shape, body)?;
    }
    let mut extra = Vec::new();
    for (name, shape) in &header.extra {
        extra.push((name.clone(), take(shape, body)?));
    }
    if cursor != body.len() {
        return Err(corrupt("trailing bytes after tensor data".into()));
    }
    Ok(Checkpoint {
        model,
        step: header.step,
        seed: header.seed,
        extra,
    })
}
