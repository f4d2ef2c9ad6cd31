//! Command-line entry point: synth, train, eval, viz, inspect.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use homreg::config::AppConfig;
use homreg::eval::{
    evaluate_dataset, evaluate_pairs, load_pair_list, visualize_dataset, Comparison, EvalReport,
    OffsetPredictor, Protocol, SizePolicy, ZeroPredictor,
};
use homreg::model::{load_checkpoint, Model};
use homreg::synth::{
    generate_dataset, read_manifest, CommandRenderer, DirSource, IdentityRenderer, ImageSource,
    ProceduralImages, ProceduralStyler, StyleRenderer,
};
use homreg::train::{resume, train, DiskDataset};

#[derive(Parser)]
#[command(
    name = "homreg",
    about = "Zero-shot multimodal homography estimation: synthesize training pairs, \
             train the correlation estimator, evaluate corner error, and visualize."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic unaligned-pair dataset with ground truth.
    Synth(SynthArgs),
    /// Train the estimator on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the zero baseline) and write a JSON report.
    Eval(EvalArgs),
    /// Render ground-truth (green) vs predicted (red) quadrilateral overlays.
    Viz(VizArgs),
    /// Print the offsets and provenance of one sample directory.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML config file ([synth] section applies).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of samples to generate.
    #[arg(long)]
    count: usize,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Directory of content PNGs (defaults to built-in procedural content).
    #[arg(long)]
    content_dir: Option<PathBuf>,
    /// Directory of style template PNGs (defaults to procedural templates).
    #[arg(long)]
    template_dir: Option<PathBuf>,
    /// Style renderer: procedural, identity, or an external command invoked
    /// as `CMD content.png template.png output.png`.
    #[arg(long, default_value = "procedural")]
    renderer: String,
    /// Override the synthesis RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel generation workers.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file ([model] and [train] sections apply).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset directory (from `synth`).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint instead of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override the training RNG seed (also seeds model initialization).
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite an output directory that already contains a training run.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate; omit with --baseline zero.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory (from `synth`).
    #[arg(long, conflicts_with = "pairs")]
    data: Option<PathBuf>,
    /// Pair-list CSV: src_path,tar_path,gt_json_path[,tag].
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Report output path (JSON).
    #[arg(long)]
    report: PathBuf,
    /// Evaluation protocol tag recorded in the report.
    #[arg(long, default_value = "within")]
    protocol: String,
    /// Evaluate the zero-offset baseline instead of a checkpoint.
    #[arg(long)]
    baseline: Option<String>,
    /// Resize pairs to this side instead of center-cropping (pair lists only);
    /// ground-truth offsets are rescaled accordingly.
    #[arg(long)]
    resize: Option<usize>,
    /// Print a comparison against these existing report files.
    #[arg(long)]
    compare: Vec<PathBuf>,
    /// Overwrite an existing report file.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (from `synth`).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for overlay PNGs.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples to render.
    #[arg(long, default_value_t = 8)]
    limit: usize,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Sample directory, e.g. dataset/sample_000000.
    #[arg(long)]
    sample: PathBuf,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; --help and --version are successes
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Viz(args) => run_viz(args),
        Command::Inspect(args) => run_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("Run with --help for usage.");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<AppConfig, CliError> {
    match path {
        Some(p) => AppConfig::load(p).map_err(|e| usage(e.to_string())),
        None => Ok(AppConfig::default()),
    }
}

fn refuse_nonempty_dir(dir: &Path, force: bool, what: &str) -> Result<(), CliError> {
    if force || !dir.exists() {
        return Ok(());
    }
    let occupied = std::fs::read_dir(dir)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false);
    if occupied {
        return Err(usage(format!(
            "{what} {} already exists and is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    Ok(())
}

fn run_synth(args: SynthArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config)?.synth;
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    cfg.validate()?;
    refuse_nonempty_dir(&args.out, args.force, "dataset directory")?;

    let contents: Box<dyn ImageSource> = match &args.content_dir {
        Some(dir) => Box::new(DirSource::new(dir)?),
        None => Box::new(ProceduralImages::new(
            cfg.rng_seed ^ 0xc0f_f33,
            64,
            cfg.padded_size() + cfg.patch_size,
        )),
    };
    let templates: Box<dyn ImageSource> = match &args.template_dir {
        Some(dir) => Box::new(DirSource::new(dir)?),
        None => Box::new(ProceduralImages::new(
            cfg.rng_seed ^ 0x7e41_947e,
            32,
            cfg.patch_size,
        )),
    };
    let renderer: Box<dyn StyleRenderer> = match args.renderer.as_str() {
        "procedural" => Box::new(ProceduralStyler::new(cfg.rng_seed ^ 0x5717_1e00)),
        "identity" => Box::new(IdentityRenderer),
        cmd => Box::new(CommandRenderer {
            program: PathBuf::from(cmd),
            work_dir: std::env::temp_dir(),
        }),
    };
    let manifest = generate_dataset(
        &args.out,
        args.count,
        &cfg,
        contents.as_ref(),
        templates.as_ref(),
        renderer.as_ref(),
        args.workers.max(1),
    )?;
    println!(
        "wrote {} samples to {} (format {})",
        manifest.count,
        args.out.display(),
        manifest.format_version
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let app = load_config(&args.config)?;
    let mut cfg = app.train;
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    let source = DiskDataset::open(&args.data, cfg.rng_seed)?;
    let report = match &args.resume {
        Some(ckpt) => resume(ckpt, &source, &cfg, &args.out)?.1,
        None => {
            if !args.force && args.out.join("metrics.jsonl").exists() {
                return Err(usage(format!(
                    "{} already contains a training run; pass --force or --resume",
                    args.out.display()
                )));
            }
            let mut model = Model::new(app.model, cfg.rng_seed)?;
            train(&mut model, &source, &cfg, &args.out)?
        }
    };
    println!(
        "trained to step {}; last checkpoint {}",
        report.final_step,
        report.last_checkpoint.display()
    );
    Ok(())
}

fn parse_protocol(s: &str) -> Result<Protocol, CliError> {
    match s {
        "within" => Ok(Protocol::Within),
        "cross" => Ok(Protocol::Cross),
        "zero-shot" => Ok(Protocol::ZeroShot),
        other => Err(usage(format!(
            "unknown protocol {other:?}; expected within, cross, or zero-shot"
        ))),
    }
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    if !args.force && args.report.exists() {
        return Err(usage(format!(
            "report {} already exists; pass --force to overwrite",
            args.report.display()
        )));
    }
    let protocol = parse_protocol(&args.protocol)?;
    let (predictor, checkpoint_id): (Box<dyn OffsetPredictor>, String) = match &args.baseline {
        Some(b) if b == "zero" => (Box::new(ZeroPredictor), "zero-baseline".into()),
        Some(b) => return Err(usage(format!("unknown baseline {b:?}; expected zero"))),
        None => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| usage("either --checkpoint or --baseline zero is required"))?;
            let ck = load_checkpoint(path)?;
            (Box::new(ck.model), path.display().to_string())
        }
    };

    let report = match (&args.data, &args.pairs) {
        (Some(data), None) => {
            evaluate_dataset(predictor.as_ref(), data, &checkpoint_id, protocol)?
        }
        (None, Some(pairs_path)) => {
            let pairs = load_pair_list(pairs_path)?;
            let policy = match args.resize {
                Some(side) => SizePolicy::Resize(side),
                None => SizePolicy::CenterCrop,
            };
            evaluate_pairs(
                predictor.as_ref(),
                &pairs,
                &pairs_path.display().to_string(),
                &checkpoint_id,
                protocol,
                policy,
            )?
        }
        _ => return Err(usage("exactly one of --data or --pairs is required")),
    };
    report.save(&args.report)?;
    println!(
        "evaluated {} samples: mean MACE {:.4}, median {:.4} -> {}",
        report.count,
        report.mean_mace,
        report.median_mace,
        args.report.display()
    );

    if !args.compare.is_empty() {
        let mut reports = vec![report];
        for p in &args.compare {
            reports.push(EvalReport::load(p)?);
        }
        let cmp = Comparison::new(reports)?;
        print!("{}", cmp.to_text());
    }
    Ok(())
}

fn run_viz(args: VizArgs) -> Result<(), CliError> {
    refuse_nonempty_dir(&args.out, args.force, "output directory")?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let written = visualize_dataset(&ck.model, &args.data, &args.out, args.limit)?;
    println!("wrote {} overlays to {}", written.len(), args.out.display());
    Ok(())
}

fn run_inspect(args: InspectArgs) -> Result<(), CliError> {
    let gt_path = args.sample.join("gt.json");
    let bytes = std::fs::read(&gt_path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", gt_path.display())))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    println!("{}", serde_json::to_string_pretty(&value)?);
    // the manifest is optional context when inspecting inside a dataset
    if let Some(root) = args.sample.parent() {
        if let Ok(manifest) = read_manifest(root) {
            println!(
                "dataset: {} samples, patch size {}",
                manifest.count, manifest.config.patch_size
            );
        }
    }
    Ok(())
}
