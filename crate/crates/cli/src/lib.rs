//! Command-line driver: synthetic data, training, evaluation, prediction,
//! profiling and the gradient suite.
//!
//! Every command that writes outputs also writes `run_config.json` next to
//! them; `lcdnet replay <file>` reruns exactly that command.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lcdnet::data::{self, AugmentConfig, RgbImage, SamplePair, SyntheticConfig};
use lcdnet::decoder::DecoderWidths;
use lcdnet::ffm::FusionMode;
use lcdnet::gmm::{NormReading, GMM_EPS};
use lcdnet::metrics::{self, MetricsRow};
use lcdnet::profiler::ReportFormat;
use lcdnet::trainer::{self, TrainConfig};
use lcdnet::{gradsuite, LcdNet, ModelConfig};

pub const CONFIG_ECHO: &str = "run_config.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const THREADS_ENV: &str = "LCDNET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "lcdnet", version, about = "Lightweight bitemporal change detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Write a seeded synthetic change dataset.
    GenSynthetic(GenArgs),
    /// Train and keep the best-IoU checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a split; writes metrics and confusion maps.
    Eval(EvalArgs),
    /// Predict one image pair.
    Predict(PredictArgs),
    /// Parameter and FLOP report.
    Profile(ProfileArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
    /// Rerun the command recorded in a config echo file.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Total number of pairs across all splits.
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub density: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub val_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
pub enum ModelSize {
    /// The full network.
    #[default]
    Full,
    /// Same topology with a few thousand parameters, for smoke tests.
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelSize::Full)]
    pub model: ModelSize,
    /// Disable channel exchange between the streams.
    #[arg(long)]
    pub no_tif: bool,
    /// Replace the fusion blocks with |x1 - x2|.
    #[arg(long)]
    pub no_ffm: bool,
    /// Disable the gating blocks in the decoder.
    #[arg(long)]
    pub no_gmm: bool,
    /// Alternative fusion: relu(relu(relu(x1) * conv1(x2)) + x2) * x1, no second conv.
    #[arg(long, conflicts_with = "no_ffm")]
    pub ffm_listing: bool,
    /// Read the gate normaliser as the square of the channel mean.
    #[arg(long)]
    pub gmm_square_of_mean: bool,
    #[arg(long, default_value_t = 0.5)]
    pub exchange_fraction: f64,
    #[arg(long, default_value_t = GMM_EPS)]
    pub eps: f64,
    /// Five decoder widths, deepest first, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub decoder_widths: Option<Vec<usize>>,
    /// Keep encoder batch-norm statistics fixed during training.
    #[arg(long)]
    pub freeze_encoder_bn: bool,
}

impl ModelArgs {
    pub fn to_config(&self, init_seed: u64) -> ModelConfig {
        let base = match self.model {
            ModelSize::Full => ModelConfig::default(),
            ModelSize::Tiny => ModelConfig::tiny(),
        };
        let fusion = if self.no_ffm {
            FusionMode::AbsDiff
        } else if self.ffm_listing {
            FusionMode::Listing
        } else {
            FusionMode::Ffm
        };
        ModelConfig {
            decoder_widths: self.decoder_widths.clone().map(DecoderWidths).unwrap_or(base.decoder_widths.clone()),
            tif: !self.no_tif,
            exchange_fraction: self.exchange_fraction,
            fusion,
            gmm: !self.no_gmm,
            gmm_norm: if self.gmm_square_of_mean { NormReading::SquareOfMean } else { NormReading::MeanOfSquares },
            eps: self.eps,
            freeze_encoder_bn: self.freeze_encoder_bn,
            init_seed,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Archive with encoder (or any matching) weights.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 2.5e-3)]
    pub weight_decay: f64,
    /// Seeds initialisation, shuffling and augmentation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Validation split; defaults to `val` when present, else `test`.
    #[arg(long)]
    pub val_split: Option<String>,
    #[arg(long)]
    pub no_augment: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Skip writing per-pair confusion maps.
    #[arg(long)]
    pub no_maps: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub t1: PathBuf,
    #[arg(long)]
    pub t2: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for `mask.png` (and `confusion.png` with `--label`).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub label: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum FormatArg {
    Text,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ProfileArgs {
    /// Square input side.
    #[arg(long, default_value_t = 256)]
    pub input: usize,
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    pub format: FormatArg,
    /// Directory for `profile.{txt,csv}`; prints to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = gradsuite::MIN_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub config: PathBuf,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<lcdnet::Error> for CliError {
    fn from(e: lcdnet::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_echo(dir: &Path, command: &Command) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(CONFIG_ECHO);
    let json = serde_json::to_string_pretty(command).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))
}

/// Reads `LCDNET_THREADS`. The engine runs on one thread, so any positive
/// cap is already honoured.
fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

fn gen_synthetic(a: &GenArgs) -> CliResult<()> {
    let cfg = SyntheticConfig {
        size: a.size,
        density: a.density,
        seed: a.seed,
    };
    let summary = data::generate_synthetic(&a.out, &cfg, a.pairs, a.test_fraction, a.val_fraction)?;
    for (split, n) in summary {
        println!("{split}: {n} pairs");
    }
    Ok(())
}

fn validation_split(data_root: &Path, requested: &Option<String>) -> String {
    match requested {
        Some(s) => s.clone(),
        None if data_root.join("val").is_dir() => "val".into(),
        None => "test".into(),
    }
}

fn train(a: &TrainArgs) -> CliResult<()> {
    let config = a.model.to_config(a.seed);
    let mut model = LcdNet::<f32>::new(&config)?;
    if let Some(p) = &a.pretrained {
        let missing = model.load_pretrained(p)?;
        log::info!("pretrained weights loaded; {} tensors kept their initial values", missing.len());
    }
    let train_set = data::load_dataset(&a.data, "train")?;
    let val_name = validation_split(&a.data, &a.val_split);
    let val_set = data::load_dataset(&a.data, &val_name)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        seed: a.seed,
        threshold: a.threshold,
        augment: if a.no_augment { AugmentConfig::none() } else { AugmentConfig::default() },
    };
    let report = trainer::fit(&mut model, &train_set, &val_set, &cfg, Some(&a.out))?;
    for r in &report.epochs {
        println!(
            "epoch {:3}  loss {:.4}  f1 {}  iou {}  {:.1}s",
            r.epoch,
            r.train_loss,
            fmt_opt(r.f1),
            fmt_opt(r.iou),
            r.seconds
        );
    }
    println!(
        "best iou {} at epoch {} ({val_name} split)",
        fmt_opt(report.best_iou),
        report.best_epoch.map_or("-".into(), |e| e.to_string())
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn dataset_name(root: &Path) -> String {
    root.file_name().map_or("dataset".into(), |n| n.to_string_lossy().into_owned())
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let mut model = LcdNet::<f32>::load_checkpoint(&a.checkpoint)?;
    let pairs = data::load_dataset(&a.data, &a.split)?;
    if pairs.is_empty() {
        return Err(CliError::Runtime(format!("split `{}` is empty", a.split)));
    }
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut counts = metrics::ConfusionCounts::default();
    let map_dir = a.out.join("confusion");
    for chunk in pairs.chunks(a.batch_size.max(1)) {
        let refs: Vec<&SamplePair> = chunk.iter().collect();
        let b = data::make_batch::<f32>(&refs)?;
        let pred = model.predict(&b.t1, &b.t2, a.threshold)?;
        let plane = chunk[0].label.data.len();
        for (p, mask) in chunk.iter().zip(pred.chunks(plane)) {
            counts += metrics::accumulate(mask, &p.label.data)?;
            if !a.no_maps {
                let rgb = metrics::render_confusion_map(mask, &p.label.data)?;
                let img = RgbImage {
                    width: p.label.width,
                    height: p.label.height,
                    data: rgb,
                };
                data::write_rgb(&map_dir.join(format!("{}.png", p.id)), &img)?;
            }
        }
    }
    let m = metrics::compute_metrics(&counts)?;
    let csv = metrics::metrics_csv(&[MetricsRow::new(&dataset_name(&a.data), &a.split, &m)])?;
    let path = a.out.join(METRICS_CSV);
    fs::write(&path, &csv).map_err(|e| io_err(&path, e))?;
    print!("{csv}");
    Ok(())
}

fn predict(a: &PredictArgs) -> CliResult<()> {
    let mut model = LcdNet::<f32>::load_checkpoint(&a.checkpoint)?;
    let t1 = data::read_rgb(&a.t1)?;
    let t2 = data::read_rgb(&a.t2)?;
    if (t1.width, t1.height) != (t2.width, t2.height) {
        return Err(CliError::Runtime(format!(
            "t1 is {}x{} but t2 is {}x{}",
            t1.width, t1.height, t2.width, t2.height
        )));
    }
    let x1 = data::images_to_tensor::<f32>(&[&t1])?;
    let x2 = data::images_to_tensor::<f32>(&[&t2])?;
    let pred = model.predict(&x1, &x2, a.threshold)?;
    let mask = data::Mask {
        width: t1.width,
        height: t1.height,
        data: pred,
    };
    data::write_mask(&a.out.join("mask.png"), &mask)?;
    if let Some(label_path) = &a.label {
        let label = data::read_mask(label_path)?;
        let rgb = metrics::render_confusion_map(&mask.data, &label.data)?;
        let img = RgbImage {
            width: mask.width,
            height: mask.height,
            data: rgb,
        };
        data::write_rgb(&a.out.join("confusion.png"), &img)?;
        let m = metrics::compute_metrics(&metrics::accumulate(&mask.data, &label.data)?)?;
        println!("f1 {}  iou {}", fmt_opt(m.f1), fmt_opt(m.iou));
    }
    println!("changed fraction {:.4}", mask.changed_fraction());
    Ok(())
}

fn profile(a: &ProfileArgs) -> CliResult<()> {
    let model = LcdNet::<f32>::new(&a.model.to_config(0))?;
    let report = model.profile((a.input, a.input))?;
    let format = match a.format {
        FormatArg::Text => ReportFormat::Text,
        FormatArg::Csv => ReportFormat::Csv,
    };
    match &a.out {
        Some(dir) => {
            let name = match format {
                ReportFormat::Text => "profile.txt",
                ReportFormat::Csv => "profile.csv",
            };
            report.emit(&dir.join(name), format)?;
            println!("{}", report.summary());
        }
        None => match format {
            ReportFormat::Text => print!("{}", report.to_text()),
            ReportFormat::Csv => print!("{}", report.to_csv()?),
        },
    }
    Ok(())
}

fn grad_check(a: &GradCheckArgs) -> CliResult<()> {
    if a.trials < gradsuite::MIN_TRIALS {
        return Err(CliError::Usage(format!("--trials must be at least {}", gradsuite::MIN_TRIALS)));
    }
    let results = gradsuite::run(a.trials, a.seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        let redrawn = if r.redrawn > 0 { format!("  ({} redrawn)", r.redrawn) } else { String::new() };
        println!("{:<30} trials {:3}  max rel err {:.3e}  {status}{redrawn}", r.name, r.trials, r.max_rel_error);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} gradient checks above {:e}", gradsuite::TOLERANCE)));
    }
    println!("all {} checks below {:e}", results.len(), gradsuite::TOLERANCE);
    Ok(())
}

/// Output directory a command echoes its configuration into.
fn echo_dir(command: &Command) -> Option<&Path> {
    match command {
        Command::GenSynthetic(a) => Some(&a.out),
        Command::Train(a) => Some(&a.out),
        Command::Eval(a) => Some(&a.out),
        Command::Predict(a) => Some(&a.out),
        Command::Profile(a) => a.out.as_deref(),
        Command::GradCheck(_) | Command::Replay(_) => None,
    }
}

pub fn execute(command: &Command) -> CliResult<()> {
    if let Command::Replay(r) = command {
        let text = fs::read_to_string(&r.config).map_err(|e| io_err(&r.config, e))?;
        let inner: Command =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", r.config.display())))?;
        if matches!(inner, Command::Replay(_)) {
            return Err(CliError::Usage("a replay file cannot name another replay".into()));
        }
        return execute(&inner);
    }
    if let Some(dir) = echo_dir(command) {
        write_echo(dir, command)?;
    }
    match command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Profile(a) => profile(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Replay(_) => unreachable!("handled above"),
    }
}

/// Parses `argv` (program name first) and runs it; returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = thread_cap().and_then(|cap| {
        if let Some(n) = cap {
            log::debug!("{THREADS_ENV}={n}; the engine uses one thread");
        }
        execute(&cli.command)
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}
