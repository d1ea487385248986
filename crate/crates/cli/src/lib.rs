//! Command implementations behind the `mfanet` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mfanet::dataset::{Dataset, MANIFEST, Manifest, PixelFormat, encode_image, encode_overlay};
use mfanet::formats::{read_file, write_atomic};
use mfanet::gradient_suite;
use mfanet::network::Network;
use mfanet::preprocessing::{ClaheParams, PhantomSpec, WindowParams, clahe, ct_window, generate_phantoms};
use mfanet::metrics::MetricsReport;
use mfanet::training::{predict_masks, run_ablation, train};

pub mod run_config;

pub use run_config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mfanet::Error),
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),
    #[error("writing to stdout: {0}")]
    Stdout(std::io::Error),
}

impl CliError {
    /// 1 for bad input, 2 for runtime and numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "mfanet", version, about = "Attention U-Net liver lesion segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Window and contrast-enhance a dataset's images.
    Preprocess(PreprocessArgs),
    /// Finite-difference check of every op, block and a tiny network.
    Gradcheck(GradcheckArgs),
    /// Train a network and write a checkpoint and loss curve.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and score all four attention variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run config supplying the other phantom settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40.0, allow_negative_numbers = true)]
    pub window_center: f64,
    #[arg(long, default_value_t = 400.0, allow_negative_numbers = true)]
    pub window_width: f64,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    pub clahe_clip: f64,
    #[arg(long, default_value_t = 4)]
    pub clahe_tiles: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV; defaults to the checkpoint path with a `.csv`
    /// extension.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Run config supplying the intensity window for `hu16` data.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for per-case overlay PNGs of prediction against ground
    /// truth.
    #[arg(long)]
    pub overlays: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs one command, writing its machine-readable summary to `stdout`.
pub fn run(cli: Cli, stdout: &mut impl Write) -> CliResult<()> {
    let text = match cli.command {
        Command::Synth(a) => synth(&a)?,
        Command::Preprocess(a) => preprocess(&a)?,
        Command::Gradcheck(a) => return gradcheck(&a, stdout),
        Command::Train(a) => train_cmd(&a)?,
        Command::Eval(a) => eval_cmd(&a)?,
        Command::Ablate(a) => ablate(&a)?,
    };
    stdout.write_all(text.as_bytes()).map_err(CliError::Stdout)
}

fn json_line(value: serde_json::Value) -> String {
    let mut s = value.to_string();
    s.push('\n');
    s
}

fn synth(a: &SynthArgs) -> CliResult<String> {
    let mut spec = match &a.config {
        Some(path) => RunConfig::load(path)?.phantom,
        None => PhantomSpec::default(),
    };
    spec.count = a.count;
    spec.size = a.size;
    spec.seed = a.seed;
    let phantoms = generate_phantoms(&spec)?;
    let pixels = (a.size * a.size) as f64;
    let fraction = if phantoms.is_empty() {
        0.0
    } else {
        phantoms.iter().map(|p| p.mask.count() as f64 / pixels).sum::<f64>() / phantoms.len() as f64
    };
    Dataset::from_phantoms(phantoms, a.size).save(&a.out)?;
    Ok(json_line(json!({
        "command": "synth",
        "out": a.out.display().to_string(),
        "count": a.count,
        "size": a.size,
        "seed": a.seed,
        "mean_lesion_fraction": fraction,
    })))
}

fn preprocess(a: &PreprocessArgs) -> CliResult<String> {
    let window = WindowParams {
        center: a.window_center,
        width: a.window_width,
    };
    let params = ClaheParams {
        tiles_x: a.clahe_tiles,
        tiles_y: a.clahe_tiles,
        clip_limit: a.clahe_clip,
        ..ClaheParams::default()
    };
    params.validate()?;
    window.validate()?;

    let dataset = Dataset::load(&a.input)?;
    let text = String::from_utf8(read_file(&a.input.join(MANIFEST))?)
        .map_err(|_| mfanet::Error::Invalid("manifest is not UTF-8".into()))?;
    let manifest = Manifest::parse(&text)?;
    let mut files = Vec::with_capacity(2 * manifest.entries.len());
    for (sample, entry) in dataset.samples.iter().zip(&manifest.entries) {
        let normalized = match dataset.format {
            PixelFormat::Hu16 => ct_window(&sample.image, &window)?,
            PixelFormat::Gray8 => sample.image.clone(),
        };
        let enhanced = clahe(&normalized, &params)?;
        files.push((entry.image.clone(), encode_image(&enhanced, PixelFormat::Gray8)));
        files.push((entry.mask.clone(), read_file(&a.input.join(&entry.mask))?));
    }
    for (rel, bytes) in &files {
        let path = a.out.join(rel);
        if let Some(parent) = path.parent() {
            create_dir(parent)?;
        }
        write_atomic(&path, bytes)?;
    }
    let out_manifest = Manifest {
        format: PixelFormat::Gray8,
        ..manifest
    };
    write_atomic(&a.out.join(MANIFEST), out_manifest.to_text().as_bytes())?;
    Ok(json_line(json!({
        "command": "preprocess",
        "out": a.out.display().to_string(),
        "count": out_manifest.entries.len(),
        "window_center": window.center,
        "window_width": window.width,
        "clahe_clip": params.clip_limit,
        "clahe_tiles": params.tiles_x,
    })))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        mfanet::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn gradcheck(a: &GradcheckArgs, stdout: &mut impl Write) -> CliResult<()> {
    let items = gradient_suite::run(a.seed)?;
    stdout
        .write_all(gradient_suite::to_csv(&items).as_bytes())
        .map_err(CliError::Stdout)?;
    let failed: Vec<String> = items
        .iter()
        .filter(|i| !i.passed())
        .map(|i| format!("{} ({:e})", i.name, i.max_rel_error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed))
    }
}

fn load_for(config: &RunConfig, data: &Path) -> CliResult<Dataset> {
    let dataset = Dataset::load(data)?;
    let size = config.network.input_size;
    if (dataset.width, dataset.height) != (size, size) {
        return Err(mfanet::Error::Config {
            key: "input_size".into(),
            reason: format!(
                "is {size} but the dataset holds {}x{} images",
                dataset.width, dataset.height
            ),
        }
        .into());
    }
    Ok(dataset)
}

fn train_cmd(a: &TrainArgs) -> CliResult<String> {
    let config = RunConfig::load(&a.config)?;
    let dataset = load_for(&config, &a.data)?;
    let samples = dataset.normalized_samples(&config.window)?;
    let (train_idx, val_idx) = config.train.split(samples.len());
    let mut net = Network::<f32>::build(config.network.clone(), config.train.seed)?;
    let log = train(&mut net, &samples[train_idx.clone()], &samples[val_idx.clone()], &config.train)?;
    let curve = a.curve.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    net.save_checkpoint(&a.out)?;
    write_atomic(&curve, log.to_csv().as_bytes())?;
    Ok(json_line(json!({
        "command": "train",
        "checkpoint": a.out.display().to_string(),
        "curve": curve.display().to_string(),
        "variant": config.network.variant.as_str(),
        "steps": config.train.max_steps,
        "train_cases": train_idx.len(),
        "val_cases": val_idx.len(),
        "final_loss": log.final_loss(),
        "final_val_dice": log.final_val_dice(),
    })))
}

fn eval_cmd(a: &EvalArgs) -> CliResult<String> {
    let window = match &a.config {
        Some(path) => RunConfig::load(path)?.window,
        None => WindowParams::default(),
    };
    let net = Network::<f32>::load_checkpoint(&a.ckpt)?;
    let dataset = Dataset::load(&a.data)?;
    let samples = dataset.normalized_samples(&window)?;
    let preds = predict_masks(&net, &samples)?;
    let report = MetricsReport::evaluate(
        samples.iter().zip(&preds).map(|(s, p)| (s.id.clone(), p, &s.mask)),
    )?;
    let overlays = match &a.overlays {
        Some(_) => samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| Ok((format!("{}.png", s.id), encode_overlay(&s.image, p, &s.mask)?)))
            .collect::<mfanet::Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    if let Some(dir) = &a.overlays {
        create_dir(dir)?;
        for (name, bytes) in &overlays {
            write_atomic(&dir.join(name), bytes)?;
        }
    }
    let mut body = report.to_json();
    body.push('\n');
    write_atomic(&a.report, body.as_bytes())?;
    Ok(json_line(json!({
        "command": "eval",
        "report": a.report.display().to_string(),
        "cases": report.cases.len(),
        "overlays": a.overlays.as_ref().map(|d| d.display().to_string()),
        "dice": report.mean.dice,
        "jaccard": report.mean.jaccard,
        "pixel_accuracy": report.mean.pixel_accuracy,
    })))
}

fn ablate(a: &AblateArgs) -> CliResult<String> {
    let config = RunConfig::load(&a.config)?;
    let dataset = load_for(&config, &a.data)?;
    let samples = dataset.normalized_samples(&config.window)?;
    let report = run_ablation(&samples, &config.network, &config.train)?;
    let mut body = report.to_json();
    body.push('\n');
    write_atomic(&a.out, body.as_bytes())?;
    Ok(json_line(serde_json::to_value(&report).expect("report serializes")))
}
