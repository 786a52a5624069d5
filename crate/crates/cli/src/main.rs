//! `stas` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 missing artifact,
//! 4 non-finite loss, 1 anything else.

mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stas::data::{build_splits, generate_synthetic, Dataset, SplitSet, SPLIT_NAMES};
use stas::error::StasError;
use stas::metrics::{evaluate, write_report, ReportRow};
use stas::training::{
    predict, pretrain_sfm, pretrain_tfm, run_baseline, train_joint, write_history, write_predictions, BaselineKind,
    Checkpoint, MetricRecord, SelectionPolicy, StasModel, TrainConfig,
};

use config::{ConfigBuilder, RunConfig};

/// Splits evaluated when none are named.
const DEFAULT_EVAL_SPLITS: [&str; 5] = ["test", "ECbT", "ECbM", "ECbH", "ECbMi"];
const HISTORY_FILE: &str = "history.jsonl";
const METRICS_FILE: &str = "metrics.csv";
const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Stas(#[from] StasError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Stas(e) => match e {
                StasError::NonFinite { .. } => 4,
                StasError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
                StasError::Config(_)
                | StasError::GridTooSmall { .. }
                | StasError::ConfigHashMismatch { .. }
                | StasError::ClassExhausted { .. }
                | StasError::Empty(_)
                | StasError::InvalidValue(_) => 2,
                _ => 1,
            },
            CliError::Io(_) | CliError::Image(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "stas", version, about = "Scale- and lag-selective precipitation bias correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Random seed; falls back to the config file, then STAS_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark and write train/val/test splits.
    GenData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the spatial element regressors.
    PretrainSfm(StageArgs),
    /// Train the temporal element regressors and the encoder-decoder.
    PretrainTfm(StageArgs),
    /// Full training; with --init only the joint stage runs.
    Train(StageArgs),
    /// Metric CSV for a checkpoint on one or more splits.
    Eval {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// train, val, test, ECbT, ECbM, ECbH or ECbMi; repeatable.
        #[arg(long)]
        split: Vec<String>,
        /// Output CSV; stdout when omitted.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Per-sample predictions of a checkpoint.
    Predict {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Fit a baseline regressor and write its predictions and metrics.
    Baseline {
        /// LR or MLP.
        #[arg(long)]
        kind: BaselineKind,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        split: Vec<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Heatmaps and a Markdown summary from prediction CSVs.
    Report {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// `METHOD=FILE` prediction CSV; repeatable, the first two are drawn.
        #[arg(long = "pred", value_name = "METHOD=FILE", required = true)]
        preds: Vec<String>,
        #[arg(long)]
        split: Vec<String>,
        /// Number of timestamps to draw, rainiest first.
        #[arg(long, default_value_t = 3)]
        frames: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StageArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Start from this checkpoint's parameters.
    #[arg(long, value_name = "DIR")]
    init: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut b = ConfigBuilder::new();
    if let Some(path) = &args.config {
        b.apply_file(path)?;
    }
    for pair in &args.sets {
        b.assign_pair(pair)?;
    }
    if let Some(seed) = args.seed {
        b.assign("seed", &seed.to_string())?;
    }
    b.seed_fallback()?;
    let cfg = b.build()?;
    log::info!("resolved configuration:\n{cfg}");
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(format!("{what} {}", path.display())))
    }
}

fn load_data(dir: &Path) -> Result<SplitSet> {
    for s in ["train", "val", "test"] {
        require(&dir.join(s).join("meta.json"), "dataset split")?;
    }
    Ok(SplitSet::load(dir)?)
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    require(&dir.join("checkpoint.json"), "checkpoint")?;
    Ok(Checkpoint::load(dir)?)
}

fn split_names(given: &[String]) -> Result<Vec<String>> {
    let names: Vec<String> = if given.is_empty() {
        DEFAULT_EVAL_SPLITS.iter().map(|s| s.to_string()).collect()
    } else {
        given.to_vec()
    };
    for n in &names {
        if !SPLIT_NAMES.contains(&n.as_str()) {
            return Err(CliError::Config(format!("unknown split {n:?}; expected one of {SPLIT_NAMES:?}")));
        }
    }
    Ok(names)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn history_bytes(h: &[MetricRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_history(&mut out, h)?;
    Ok(out)
}

fn report_bytes(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_report(&mut out, rows)?;
    Ok(out)
}

fn gen_data(out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let seed = cfg.train.seed;
    let world = generate_synthetic(&cfg.generator, seed)?;
    let splits = build_splits(&world, &cfg.generator, seed)?;
    splits.save(out)?;
    write_file(&out.join(CONFIG_FILE), cfg.to_string().as_bytes())?;
    log::info!(
        "wrote {} / {} / {} samples to {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Sfm,
    Tfm,
    Full,
}

fn start_model(cfg: &TrainConfig, init: Option<&Path>) -> Result<(StasModel, Vec<MetricRecord>)> {
    match init {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            ck.verify(&stas::training::config_hash(&cfg.model, &cfg.ablation))?;
            Ok((ck.model, ck.history))
        }
        None => Ok((StasModel::new(&cfg.model, &cfg.ablation, cfg.seed)?, Vec::new())),
    }
}

fn run_stage(stage: Stage, a: &StageArgs) -> Result<()> {
    let cfg = resolve(&a.cfg)?.train;
    let data = load_data(&a.data)?;
    let (mut model, mut history) = start_model(&cfg, a.init.as_deref())?;
    model.check_dataset(&data.train)?;
    let ck = match stage {
        Stage::Sfm | Stage::Tfm => {
            if stage == Stage::Sfm {
                pretrain_sfm(&mut model, &data.train, &data.val, &cfg, &mut history)?;
            } else {
                pretrain_tfm(&mut model, &data.train, &data.val, &cfg, &mut history)?;
            }
            let policy = SelectionPolicy::uniform(data.train.meta.stations.len(), cfg.model.input_scale, cfg.model.max_lag);
            Checkpoint {
                model,
                config: cfg.clone(),
                policy,
                epoch: 0,
                history: history.clone(),
                optimizer: None,
            }
        }
        Stage::Full => {
            if a.init.is_none() {
                pretrain_sfm(&mut model, &data.train, &data.val, &cfg, &mut history)?;
                pretrain_tfm(&mut model, &data.train, &data.val, &cfg, &mut history)?;
            }
            train_joint(&mut model, &data.train, &data.val, &cfg, &mut history)?
        }
    };
    ck.save(&a.out)?;
    write_file(&a.out.join(HISTORY_FILE), &history_bytes(&history)?)?;
    if stage == Stage::Full {
        let preds = predict(&ck, &data.val)?;
        let y: Vec<f64> = preds.iter().map(|p| p.y_t).collect();
        let row = evaluate("val", "STAS", &y, &data.val.rain())?;
        write_file(&a.out.join(METRICS_FILE), &report_bytes(&[row])?)?;
    }
    log::info!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, splits: &[String], out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = load_data(data)?;
    let mut rows = Vec::new();
    for name in split_names(splits)? {
        let ds = data.get(&name, ck.config.seed)?;
        rows.push(score_split(&ck, &ds, &name)?);
    }
    let bytes = report_bytes(&rows)?;
    match out {
        Some(p) => write_file(p, &bytes)?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}

fn score_split(ck: &Checkpoint, ds: &Dataset, name: &str) -> Result<ReportRow> {
    let preds = if ds.is_empty() { Vec::new() } else { predict(ck, ds)? };
    let y: Vec<f64> = preds.iter().map(|p| p.y_t).collect();
    Ok(evaluate(name, "STAS", &y, &ds.rain())?)
}

fn predict_cmd(checkpoint: &Path, data: &Path, split: &str, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let data = load_data(data)?;
    split_names(&[split.to_string()])?;
    let ds = data.get(split, ck.config.seed)?;
    let preds = predict(&ck, &ds)?;
    let mut bytes = Vec::new();
    write_predictions(&mut bytes, &preds)?;
    write_file(out, &bytes)?;
    log::info!("{} predictions written to {}", preds.len(), out.display());
    Ok(())
}

fn baseline(kind: BaselineKind, data: &Path, out: &Path, splits: &[String], args: &ConfigArgs) -> Result<()> {
    let cfg = resolve(args)?.train;
    let data = load_data(data)?;
    let run = run_baseline(kind, &data.train, &cfg)?;
    let stage = format!("baseline_{}", kind.name().to_ascii_lowercase());
    let history: Vec<MetricRecord> = run
        .loss_curve
        .iter()
        .enumerate()
        .map(|(e, &l)| MetricRecord::new(&stage, e, l))
        .collect();
    let mut rows = Vec::new();
    for name in split_names(splits)? {
        let ds = data.get(&name, cfg.seed)?;
        let preds = run.baseline.predict(&ds)?;
        let mut bytes = Vec::new();
        write_predictions(&mut bytes, &preds)?;
        write_file(&out.join(format!("predictions_{name}.csv")), &bytes)?;
        let y: Vec<f64> = preds.iter().map(|p| p.y_t).collect();
        rows.push(evaluate(&name, kind.name(), &y, &ds.rain())?);
    }
    write_file(&out.join(METRICS_FILE), &report_bytes(&rows)?)?;
    write_file(&out.join(HISTORY_FILE), &history_bytes(&history)?)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, cfg } => gen_data(&out, &cfg),
        Command::PretrainSfm(a) => run_stage(Stage::Sfm, &a),
        Command::PretrainTfm(a) => run_stage(Stage::Tfm, &a),
        Command::Train(a) => run_stage(Stage::Full, &a),
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => eval(&checkpoint, &data, &split, out.as_deref()),
        Command::Predict {
            checkpoint,
            data,
            split,
            out,
        } => predict_cmd(&checkpoint, &data, &split, &out),
        Command::Baseline {
            kind,
            data,
            out,
            split,
            cfg,
        } => baseline(kind, &data, &out, &split, &cfg),
        Command::Report {
            data,
            preds,
            split,
            frames,
            out,
        } => {
            let data = load_data(&data)?;
            let names = split_names(&split)?;
            report::run(&data, &preds, &names, frames, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
