//! `ssiu`: train, evaluate, run and inspect SSIU super-resolution models.
//!
//! Exit status: 0 on success, 2 for invalid configuration or arguments,
//! 1 for any other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssiu_core::checkpoint;
use ssiu_core::config::{RunConfig, RunDirs};
use ssiu_core::data::{load_image_with_note, save_png, Coercion, DatasetManifest, StoredPair};
use ssiu_core::eval::{
    evaluate, time_inference, EvalOptions, Interpolation, InterpolationBaseline, SuperResolver, TileSpec,
};
use ssiu_core::hqs::suite::{run_suite, DEFAULT_INSTANCES, DEFAULT_TOLERANCE};
use ssiu_core::train::{train, TrainData, TrainOptions};
use ssiu_core::{Error, SsiuModel};

/// Selects the compute device; only `cpu` is available.
const DEVICE_VAR: &str = "SSIU_DEVICE";

#[derive(Parser)]
#[command(name = "ssiu", version, about = "Lightweight image super-resolution with structural-similarity unfolding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Score a checkpoint or an interpolation baseline on a dataset split.
    Eval(EvalArgs),
    /// Super-resolve one PNG.
    Infer(InferArgs),
    /// Check the HQS solver against a coordinate-descent LASSO reference.
    OracleCheck(OracleArgs),
    /// Print parameter count and FLOP estimate of a model configuration.
    Flops(FlopsArgs),
    /// Time forward passes on random inputs.
    Time(TimeArgs),
    /// Print the fully materialized run configuration.
    ShowConfig(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.lambda_f=0`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Assemble batches serially so checkpoints are bit-reproducible.
    #[arg(long)]
    deterministic: bool,
    /// Rescan dataset directories instead of reading cached indexes.
    #[arg(long)]
    rebuild_cache: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Score `bicubic` or `bilinear` upsampling instead of a checkpoint.
    #[arg(long)]
    baseline: Option<Interpolation>,
    /// Dataset root holding `{split}/HR` and `{split}/LR/x{s}`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Expected scale; must match the checkpoint. Required with `--baseline`.
    #[arg(long)]
    scale: Option<usize>,
    /// LR tile side for tiled inference.
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long, default_value_t = 8)]
    tile_overlap: usize,
    /// Directory for `bicubic | model | HR` comparison strips.
    #[arg(long)]
    comparisons: Option<PathBuf>,
    /// Centre-crop side of comparison strips in HR pixels.
    #[arg(long)]
    comparison_crop: Option<usize>,
    /// JSON-lines report path; derived from the checkpoint location when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    rebuild_cache: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long, default_value_t = 8)]
    tile_overlap: usize,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_INSTANCES)]
    instances: usize,
    /// Largest accepted ℓ∞ distance to the reference solution.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output (SR) height in pixels.
    #[arg(long, default_value_t = 720)]
    height: usize,
    /// Output (SR) width in pixels.
    #[arg(long, default_value_t = 1280)]
    width: usize,
}

#[derive(Args)]
struct TimeArgs {
    /// Time a trained model; an untrained one from `--config` otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Input (LR) height in pixels.
    #[arg(long, default_value_t = 180)]
    height: usize,
    /// Input (LR) width in pixels.
    #[arg(long, default_value_t = 320)]
    width: usize,
    #[arg(long, default_value_t = 5)]
    runs: usize,
}

/// A failure carrying its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::InvalidArgument(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult = std::result::Result<(), Failure>;

fn check_device() -> CliResult {
    match std::env::var(DEVICE_VAR) {
        Ok(d) if !d.eq_ignore_ascii_case("cpu") => Err(usage(format!(
            "{DEVICE_VAR}={d} is not available; only `cpu` is supported"
        ))),
        _ => Ok(()),
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    match &args.config {
        Some(p) => RunConfig::load(p, &args.overrides),
        None => RunConfig::parse("", &args.overrides),
    }
}

/// First `limit` pairs of a split (`0` = all), synthesizing missing LR images.
fn load_split(root: &Path, split: &str, scale: usize, limit: usize, rebuild: bool) -> Result<Vec<StoredPair>, Error> {
    let mut m = DatasetManifest::open(root, split, scale, rebuild)?;
    let created = m.ensure_lr()?;
    if created > 0 {
        log::info!("{split}: synthesized {created} x{scale} LR images");
    }
    let n = if limit == 0 { m.len() } else { limit.min(m.len()) };
    (0..n).map(|i| m.load(i)).collect()
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    cfg.validate_for_training()?;
    let dirs = RunDirs::create(&cfg.output_dir)?;
    dirs.write_config(&cfg)?;
    let scale = cfg.model.scale;
    let data = TrainData {
        train: load_split(&cfg.data.root, &cfg.data.train_split, scale, cfg.data.max_train_images, args.rebuild_cache)?,
        val: if cfg.data.val_split.is_empty() {
            Vec::new()
        } else {
            load_split(&cfg.data.root, &cfg.data.val_split, scale, cfg.data.max_val_images, args.rebuild_cache)?
        },
    };
    let mut model = SsiuModel::build(&cfg.model, cfg.seed)?;
    log::info!(
        "training x{scale} model with {} parameters on {} images ({} validation) into {}",
        model.count_parameters(),
        data.train.len(),
        data.val.len(),
        dirs.root.display()
    );
    let outcome = train(
        &mut model,
        &data,
        &cfg.train,
        &TrainOptions {
            dirs: Some(&dirs),
            deterministic: args.deterministic,
        },
    )?;
    if let Some(last) = outcome.history.last() {
        let val = last.val_psnr.map_or_else(String::new, |v| format!(", validation PSNR {v:.3} dB"));
        println!("iteration {}: loss {:.6}{val}", last.iteration, last.loss);
    }
    for p in &outcome.checkpoints {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

/// `run/checkpoints/x.ckpt` reports into `run/reports/`; other checkpoints
/// report beside themselves.
fn default_report_path(checkpoint: Option<&Path>, split: &str, scale: usize, label: &str) -> PathBuf {
    let file = format!("eval_{label}_{split}_x{scale}.jsonl");
    let Some(ckpt) = checkpoint else {
        return PathBuf::from("reports").join(file);
    };
    let dir = ckpt.parent().unwrap_or(Path::new(""));
    if dir.file_name().is_some_and(|n| n == "checkpoints") {
        if let Some(run) = dir.parent() {
            return run.join("reports").join(file);
        }
    }
    dir.join(file)
}

fn tile_spec(tile: Option<usize>, overlap: usize) -> Result<Option<TileSpec>, Failure> {
    match tile {
        None | Some(0) => Ok(None),
        Some(t) if overlap >= t => Err(usage("--tile-overlap must be smaller than --tile")),
        Some(t) => Ok(Some(TileSpec { tile: t, overlap })),
    }
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let (model, label): (Box<dyn SuperResolver>, String) = match (&args.checkpoint, args.baseline) {
        (Some(p), _) => {
            let m = checkpoint::load(p)?;
            let stem = p.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
            (Box::new(m), stem)
        }
        (None, Some(kind)) => {
            let scale = args.scale.ok_or_else(|| usage("--baseline requires --scale"))?;
            let label = format!("{kind:?}").to_lowercase();
            (Box::new(InterpolationBaseline { kind, scale }), label)
        }
        (None, None) => return Err(usage("one of --checkpoint or --baseline is required")),
    };
    let scale = model.scale();
    if let Some(s) = args.scale.filter(|&s| s != scale) {
        return Err(usage(format!("--scale {s} does not match the checkpoint scale x{scale}")));
    }
    let tile = tile_spec(args.tile, args.tile_overlap)?;
    let mut manifest = DatasetManifest::open(&args.dataset, &args.split, scale, args.rebuild_cache)?;
    let created = manifest.ensure_lr()?;
    if created > 0 {
        log::info!("{}: synthesized {created} x{scale} LR images", args.split);
    }
    let report = evaluate(
        model.as_ref(),
        &manifest,
        &EvalOptions {
            tile,
            comparison_dir: args.comparisons,
            comparison_crop: args.comparison_crop,
        },
    )?;
    print!("{}", report.to_table());
    let path = args
        .report
        .unwrap_or_else(|| default_report_path(args.checkpoint.as_deref(), &args.split, scale, &label));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure {
            code: 1,
            message: format!("cannot create {}: {e}", dir.display()),
        })?;
    }
    std::fs::write(&path, report.to_json_lines()).map_err(|e| Failure {
        code: 1,
        message: format!("cannot write {}: {e}", path.display()),
    })?;
    println!("report written to {}", path.display());
    Ok(())
}

fn cmd_infer(args: InferArgs) -> CliResult {
    let model = checkpoint::load(&args.checkpoint)?;
    let (lr, note) = load_image_with_note(&args.input)?;
    match note {
        Coercion::GrayToRgb => log::warn!("{}: grayscale input replicated to 3 channels", args.input.display()),
        Coercion::DroppedAlpha => log::warn!("{}: alpha channel discarded", args.input.display()),
        Coercion::None => {}
    }
    let sr = match tile_spec(args.tile, args.tile_overlap)? {
        Some(t) => ssiu_core::eval::tiled_super_resolve(&model, &lr, t)?,
        None => model.forward(&lr)?,
    };
    save_png(&sr.mapv(|v| v.clamp(0.0, 1.0)), &args.output)?;
    let (_, h, w) = sr.dim();
    println!("wrote {}x{} image to {}", w, h, args.output.display());
    Ok(())
}

fn cmd_oracle_check(args: OracleArgs) -> CliResult {
    if !(args.tolerance > 0.0) {
        return Err(usage("--tolerance must be positive"));
    }
    let report = run_suite(args.seed, args.instances, args.tolerance);
    print!("{}", report.to_table());
    let failed: Vec<String> = report.failures().map(|r| r.seed.to_string()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: format!("{} instance(s) failed; seeds: {}", failed.len(), failed.join(", ")),
        })
    }
}

fn cmd_flops(args: FlopsArgs) -> CliResult {
    let cfg = load_config(&args.config)?;
    let model = SsiuModel::build(&cfg.model, cfg.seed)?;
    let r = model.flops(args.height, args.width)?;
    println!("scale: x{}", cfg.model.scale);
    println!("parameters: {} ({:.2} K)", model.count_parameters(), model.count_parameters() as f64 / 1e3);
    println!(
        "input: {}x{}  output: {}x{}",
        r.input_hw.1, r.input_hw.0, r.output_hw.1, r.output_hw.0
    );
    println!("flops: {} ({:.2} G)", r.total, r.gflops());
    println!("attention flops: {} ({:.2} G)", r.attention, r.attention as f64 / 1e9);
    println!("accounting rules:");
    for rule in &r.rules {
        println!("  - {rule}");
    }
    Ok(())
}

fn cmd_time(args: TimeArgs) -> CliResult {
    let model = match &args.checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => {
            let cfg = load_config(&args.config)?;
            SsiuModel::build(&cfg.model, cfg.seed)?
        }
    };
    let report = time_inference(&model, args.height, args.width, args.runs, 0)?;
    println!("device: {}", ssiu_core::eval::device_description());
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_show_config(args: ConfigArgs) -> CliResult {
    print!("{}", load_config(&args)?.to_toml());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = check_device().and_then(|()| match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::OracleCheck(a) => cmd_oracle_check(a),
        Command::Flops(a) => cmd_flops(a),
        Command::Time(a) => cmd_time(a),
        Command::ShowConfig(a) => cmd_show_config(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
