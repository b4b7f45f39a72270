//! The `r3d` command line: synthetic data, training runs, evaluation,
//! architecture inspection and results tables.

pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use r3d_core::datapipe::{self, DatasetManifest, Split, SyntheticConfig, MANIFEST_FILE};
use r3d_core::evaluator::{self, EvalReport, TableFormat, TableRow, VideoPrediction};
use r3d_core::trainer::{self, Checkpoint, EpochMetrics, TrainConfig, Trainer, METRICS_HEADER};
use r3d_core::{assemble_network, ArchitectureSpec};
use serde::Serialize;

use config::{ArchitectureSection, ResolvedConfig, RunConfig, DEFAULT_KEEP_CHECKPOINTS};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const CONFIG_LOCK: &str = "config.lock";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// A failure with the process exit code it maps to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: EXIT_DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<r3d_core::Error> for CliError {
    fn from(e: r3d_core::Error) -> Self {
        let code = if e.is_numeric() {
            EXIT_NUMERIC
        } else if e.is_data() {
            EXIT_DATA
        } else {
            EXIT_USAGE
        };
        CliError { code, message: e.to_string() }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

#[derive(Parser, Debug)]
#[command(name = "r3d", version, about = "3D residual networks for video face recognition")]
pub struct Cli {
    /// Run configuration (TOML)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialisation and sampling
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to all cores)
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset
    Synth(SynthArgs),
    /// Train a network, writing metrics and checkpoints to the run directory
    Train(TrainArgs),
    /// Evaluate a checkpoint with sliding-window video prediction
    Eval(EvalArgs),
    /// Print the per-layer table of an architecture
    Inspect(InspectArgs),
    /// Combine results of several runs into one comparison table
    Table(TableArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub videos_per_class: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub frames: u64,
    /// Frame size as HEIGHTxWIDTH
    #[arg(long, default_value = "240x320", value_parser = parse_size)]
    pub size: [usize; 2],
    /// Fraction of each class's videos in the train split
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Standard deviation of per-pixel noise
    #[arg(long)]
    pub noise_std: Option<f64>,
}

fn parse_size(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let parse = |v: &str| match v.trim().parse::<usize>() {
        Ok(n) if n >= 2 => Ok(n),
        _ => Err(format!("frame extents must be integers >= 2, got {s:?}")),
    };
    Ok([parse(h)?, parse(w)?])
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest (or the directory holding manifest.json)
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Architecture preset
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    /// Continue from this checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Architecture the checkpoint is expected to hold
    #[arg(long)]
    pub arch: Option<String>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Architecture preset
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FormatArg {
    Markdown,
    Csv,
}

#[derive(Args, Debug)]
pub struct TableArgs {
    /// Run directories (or results.csv files)
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: FormatArg,
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}").map_err(|e| CliError::data(e.to_string()))?;
            return Ok(());
        }
        Err(e) => return Err(CliError::config(e.to_string().trim_end().to_string())),
    };
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global();
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(&cli, a, out),
        Command::Train(a) => cmd_train(&cli, a, out),
        Command::Eval(a) => cmd_eval(&cli, a, out),
        Command::Inspect(a) => cmd_inspect(&cli, a, out),
        Command::Table(a) => cmd_table(&cli, a, out),
    }
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(|e| CliError::data(format!("cannot write output: {e}")))?
    };
}

fn cmd_synth(cli: &Cli, a: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = cli.out.as_ref().ok_or_else(|| CliError::config("synth needs --out"))?;
    let mut cfg = SyntheticConfig::new(a.classes as usize, a.videos_per_class as usize, a.frames as usize, a.size, cli.seed.unwrap_or(0));
    if let Some(f) = a.train_fraction {
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::config(format!("--train-fraction must lie in (0, 1), got {f}")));
        }
        cfg.train_fraction = f;
    }
    if let Some(s) = a.noise_std {
        if !(s.is_finite() && s >= 0.0) {
            return Err(CliError::config(format!("--noise-std must be finite and non-negative, got {s}")));
        }
        cfg.noise_std = s;
    }
    let manifest = datapipe::generate_synthetic_dataset(dir, &cfg)?;
    say!(out, "wrote {} videos ({} classes) to {}", manifest.videos.len(), manifest.num_classes(), dir.join(MANIFEST_FILE).display());
    Ok(())
}

fn load_run_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let Some(path) = &cli.config else { return Ok(RunConfig::default()) };
    let mut cfg = RunConfig::load(path)?;
    cfg.rebase(path.parent().unwrap_or(Path::new("")));
    Ok(cfg)
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_manifest(p: &Path) -> Result<DatasetManifest, CliError> {
    let path = manifest_path(p);
    if !path.exists() {
        return Err(CliError::data(format!("dataset manifest {} does not exist", path.display())));
    }
    Ok(DatasetManifest::load(&path)?)
}

fn with_preset(section: &ArchitectureSection, arch: &Option<String>) -> ArchitectureSection {
    match arch {
        Some(name) => ArchitectureSection { preset: Some(name.clone()), ..section.clone() },
        None => section.clone(),
    }
}

/// Config file plus flags, with the dataset loaded.
fn resolve_training(cli: &Cli, a: &TrainArgs) -> Result<(ResolvedConfig, DatasetManifest), CliError> {
    let cfg = load_run_config(cli)?;
    let dataset = a
        .dataset
        .clone()
        .or(cfg.dataset.clone())
        .ok_or_else(|| CliError::config("no dataset given (use --dataset or dataset in the config)"))?;
    let output_dir = cli
        .out
        .clone()
        .or(cfg.output_dir.clone())
        .ok_or_else(|| CliError::config("no output directory given (use --out or output_dir in the config)"))?;
    let manifest = load_manifest(&dataset)?;
    let mut train = cfg.train.clone();
    if let Some(s) = cli.seed {
        train.seed = s;
    }
    if let Some(e) = a.epochs {
        train.max_epochs = e as usize;
    }
    train.validate()?;

    let (architecture, augment) = match &a.resume {
        Some(ckpt_path) if cli.config.is_none() && a.arch.is_none() => {
            let ckpt = load_checkpoint(ckpt_path)?;
            train = TrainConfig {
                max_epochs: a.epochs.map_or(ckpt.train.max_epochs, |e| e as usize),
                seed: cli.seed.unwrap_or(ckpt.train.seed),
                ..ckpt.train.clone()
            };
            (ckpt.spec, ckpt.augment)
        }
        _ => {
            let spec = with_preset(&cfg.architecture, &a.arch).resolve(Some(manifest.num_classes()))?;
            let augment = cfg.augment.resolve(&spec)?;
            (spec, augment)
        }
    };
    trainer::check_compatible(&architecture, &manifest, &augment)?;
    let resolved = ResolvedConfig {
        dataset: manifest_path(&dataset),
        output_dir,
        keep_checkpoints: cfg.keep_checkpoints.unwrap_or(DEFAULT_KEEP_CHECKPOINTS),
        architecture,
        train,
        augment,
    };
    Ok((resolved, manifest))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    trainer::load_checkpoint(path).map_err(|e| {
        let named = matches!(e, r3d_core::Error::Io { .. });
        let mut err = CliError::from(e);
        if !named {
            err.message = format!("{}: {}", path.display(), err.message);
        }
        err
    })
}

/// Names of the fields where two values disagree.
fn differing_fields<T: Serialize>(a: &T, b: &T) -> Vec<String> {
    let to_map = |v: &T| match toml::Value::try_from(v) {
        Ok(toml::Value::Table(t)) => t,
        _ => toml::map::Map::new(),
    };
    let (ma, mb) = (to_map(a), to_map(b));
    let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| ma.get(*k) != mb.get(*k)).cloned().collect()
}

fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Result<(), CliError> {
    let mut text = format!("{METRICS_HEADER}\n");
    for m in history {
        text.push_str(&m.csv_row());
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

/// Deletes all but the newest `keep` per-epoch checkpoints.
fn prune_checkpoints(dir: &Path, keep: usize) -> Result<(), CliError> {
    if keep == 0 {
        return Ok(());
    }
    let mut epochs: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            let name = path.file_name()?.to_str()?;
            let n = name.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((n, path))
        })
        .collect();
    epochs.sort();
    let excess = epochs.len().saturating_sub(keep);
    for (_, path) in &epochs[..excess] {
        fs::remove_file(path).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn best_val_loss(history: &[EpochMetrics]) -> f64 {
    history.iter().map(|m| m.val_loss).fold(f64::INFINITY, f64::min)
}

fn cmd_train(cli: &Cli, a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (cfg, manifest) = resolve_training(cli, a)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut expected = ckpt.train.clone();
            expected.max_epochs = cfg.train.max_epochs;
            let mut diffs = differing_fields(&ckpt.spec, &cfg.architecture);
            diffs.extend(differing_fields(&ckpt.augment, &cfg.augment).into_iter().map(|f| format!("augment.{f}")));
            diffs.extend(differing_fields(&expected, &cfg.train).into_iter().map(|f| format!("train.{f}")));
            if !diffs.is_empty() {
                return Err(CliError::config(format!("checkpoint {} does not match the run config ({})", path.display(), diffs.join(", "))));
            }
            let mut t = Trainer::from_checkpoint(ckpt, manifest)?;
            t.train.max_epochs = cfg.train.max_epochs;
            say!(out, "resuming {} from epoch {}", t.net.spec().name, t.epoch);
            t
        }
        None => Trainer::new(&cfg.architecture, manifest, cfg.train.clone(), cfg.augment.clone())?,
    };

    let run_dir = &cfg.output_dir;
    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;
    write_file(&run_dir.join(CONFIG_LOCK), cfg.to_toml().as_bytes())?;
    say!(
        out,
        "training {} ({} parameters) for {} epochs into {}",
        cfg.architecture.name,
        trainer.net.num_params(),
        cfg.train.max_epochs,
        run_dir.display()
    );

    let mut best = best_val_loss(&trainer.history);
    let start = Instant::now();
    while trainer.epoch < cfg.train.max_epochs {
        let m = trainer.run_epoch()?;
        say!(
            out,
            "epoch {:4}  lr {:.1e}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}  {:.1}s",
            m.epoch,
            m.lr,
            m.train_loss,
            m.train_acc,
            m.val_loss,
            m.val_acc,
            m.wall_seconds
        );
        write_metrics(&run_dir.join(METRICS_FILE), &trainer.history)?;
        let ckpt = trainer.checkpoint();
        trainer::save_checkpoint(ckpt_dir.join(epoch_checkpoint_name(m.epoch)), &ckpt)?;
        if m.val_loss < best {
            best = m.val_loss;
            trainer::save_checkpoint(ckpt_dir.join(BEST_CHECKPOINT), &ckpt)?;
        }
        prune_checkpoints(&ckpt_dir, cfg.keep_checkpoints)?;
    }
    write_metrics(&run_dir.join(METRICS_FILE), &trainer.history)?;
    if let Some(last) = trainer.history.last() {
        let best_epoch = trainer.history.iter().find(|m| m.val_loss == best).map_or(0, |m| m.epoch);
        say!(
            out,
            "done: {} epochs, final train acc {:.4}, best val loss {:.4} at epoch {} ({:.1}s)",
            last.epoch,
            last.train_acc,
            best,
            best_epoch,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

/// Contents of `report.json`. Wall-clock time is left out so that repeated
/// evaluations write identical files.
#[derive(Serialize)]
struct ReportFile<'a> {
    architecture: &'a str,
    checkpoint_epoch: usize,
    split: Split,
    video_accuracy: f64,
    clip_accuracy: f64,
    num_videos: usize,
    num_clips: usize,
    class_names: &'a [String],
    confusion: &'a [Vec<usize>],
    predictions: &'a [VideoPrediction],
}

fn cmd_eval(cli: &Cli, a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_run_config(cli)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let dataset = a
        .dataset
        .clone()
        .or(cfg.dataset.clone())
        .ok_or_else(|| CliError::config("no dataset given (use --dataset or dataset in the config)"))?;
    let manifest = load_manifest(&dataset)?;

    let section = with_preset(&cfg.architecture, &a.arch);
    if !section.is_empty() {
        let expected = section.resolve(Some(ckpt.spec.num_classes))?;
        let diffs = differing_fields(&expected, &ckpt.spec);
        if !diffs.is_empty() {
            return Err(CliError::config(format!(
                "architecture mismatch: config describes {} but checkpoint holds {} (differs in {})",
                expected.name,
                ckpt.spec.name,
                diffs.join(", ")
            )));
        }
    }
    let run_dir = match cli.out.clone().or(cfg.output_dir.clone()) {
        Some(d) => d,
        None => default_eval_dir(&a.checkpoint),
    };
    trainer::check_compatible(&ckpt.spec, &manifest, &ckpt.augment)?;
    let mut net = assemble_network::<f32>(&ckpt.spec, ckpt.train.seed)?;
    ckpt.restore_into(&mut net)?;

    let split = Split::from(a.split);
    let report = evaluator::evaluate_dataset(&net, &ckpt.spec.name, &manifest, split, &ckpt.augment)?;
    write_eval_outputs(&run_dir, &report, &ckpt, split, &manifest.class_names)?;
    say!(
        out,
        "{} on {:?} split: video accuracy {:.4} ({} videos), clip accuracy {:.4} ({} clips), {:.1}s",
        ckpt.spec.name,
        split,
        report.video_accuracy,
        report.num_videos,
        report.clip_accuracy,
        report.num_clips,
        report.runtime_seconds
    );
    say!(out, "results written to {}", run_dir.display());
    Ok(())
}

/// The run directory of `run/checkpoints/x.ckpt`, else the checkpoint's own directory.
fn default_eval_dir(ckpt: &Path) -> PathBuf {
    let parent = ckpt.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if parent.file_name().is_some_and(|n| n == CHECKPOINT_DIR) {
        parent.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf()
    } else {
        parent.to_path_buf()
    }
}

fn write_eval_outputs(dir: &Path, report: &EvalReport, ckpt: &Checkpoint, split: Split, class_names: &[String]) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let rows = [TableRow::from(report)];
    write_file(&dir.join("results.csv"), evaluator::emit_results_table(&rows, TableFormat::Csv)?.as_bytes())?;
    write_file(&dir.join("results.md"), evaluator::emit_results_table(&rows, TableFormat::Markdown)?.as_bytes())?;
    write_file(&dir.join("confusion.csv"), evaluator::confusion_csv(report, class_names).as_bytes())?;
    let file = ReportFile {
        architecture: &report.architecture,
        checkpoint_epoch: ckpt.epoch,
        split,
        video_accuracy: report.video_accuracy,
        clip_accuracy: report.clip_accuracy,
        num_videos: report.num_videos,
        num_clips: report.num_clips,
        class_names,
        confusion: &report.confusion,
        predictions: &report.predictions,
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| CliError::data(e.to_string()))?;
    write_file(&dir.join("report.json"), json.as_bytes())
}

fn cmd_inspect(cli: &Cli, a: &InspectArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_run_config(cli)?;
    let section = with_preset(&cfg.architecture, &a.arch);
    if section.is_empty() {
        return Err(CliError::config("no architecture given (use --arch or an [architecture] table)"));
    }
    let classes = match (a.classes, &cfg.dataset) {
        (Some(k), _) => Some(k as usize),
        (None, Some(d)) if section.num_classes.is_none() => Some(load_manifest(d)?.num_classes()),
        _ => None,
    };
    let section = ArchitectureSection { num_classes: classes.or(section.num_classes), ..section };
    let spec = section.resolve(None)?;
    let net = assemble_network::<f32>(&spec, cli.seed.unwrap_or(0))?;
    write_inspect_table(&spec, &net, out)
}

fn write_inspect_table(spec: &ArchitectureSpec, net: &r3d_core::Network<f32>, out: &mut dyn Write) -> Result<(), CliError> {
    say!(out, "architecture {} ({}), stages {:?}, clip {:?}, {} classes", spec.name, spec.genre, spec.stage_depths, spec.clip_shape, spec.num_classes);
    let rows = net.summary();
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    say!(out, "{:<width$}  {:<16}  {:<22}  {:>12}", "layer", "kind", "output shape", "params");
    for r in &rows {
        let shape = format!("{:?}", &r.output_shape[1..]);
        say!(out, "{:<width$}  {:<16}  {:<22}  {:>12}", r.name, r.kind, shape, r.params);
    }
    say!(out, "feature channels: {}", net.feature_channels());
    say!(out, "total parameters: {}", net.num_params());
    Ok(())
}

fn cmd_table(cli: &Cli, a: &TableArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for run in &a.runs {
        let path = if run.is_dir() { run.join("results.csv") } else { run.clone() };
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        rows.extend(evaluator::parse_results_csv(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?);
    }
    let md = evaluator::emit_results_table(&rows, TableFormat::Markdown)?;
    let csv = evaluator::emit_results_table(&rows, TableFormat::Csv)?;
    if let Some(dir) = &cli.out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_file(&dir.join("comparison.md"), md.as_bytes())?;
        write_file(&dir.join("comparison.csv"), csv.as_bytes())?;
    }
    let text = match a.format {
        FormatArg::Markdown => md,
        FormatArg::Csv => csv,
    };
    out.write_all(text.as_bytes()).map_err(|e| CliError::data(format!("cannot write output: {e}")))
}
