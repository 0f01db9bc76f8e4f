use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::config::{Method, Overrides, RunConfig};
use super::{eval, train};
use crate::metrics::PxApMode;
use crate::synthdata::{self, Split};

/// Weakly-supervised localization by weight-map training.
#[derive(Parser, Debug)]
#[command(name = "wmaploc", version, about)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonOpts {
    /// JSON run configuration; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Training method: I (classifier) or II (siamese).
    #[arg(long)]
    method: Option<Method>,
    /// Mask regularizer weight override.
    #[arg(long)]
    lambda: Option<f64>,
    /// Disable the inner triplet term (method II).
    #[arg(long)]
    no_inner: bool,
    /// Disable the outer triplet term (method II).
    #[arg(long)]
    no_outer: bool,
    /// Disable the mask regularizer.
    #[arg(long)]
    no_reg: bool,
    /// Output (run) directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root override.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset at the configured root.
    GenData {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Train the label classifier (method I pretraining).
    TrainClassifier {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Pretrain the Siamese embedder (method II pretraining).
    TrainEmbedder {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Train the weight-map generator against the frozen network.
    TrainGenerator {
        #[command(flatten)]
        common: CommonOpts,
        /// Pretrained checkpoint to freeze (defaults to the run's best).
        #[arg(long)]
        f_checkpoint: Option<PathBuf>,
    },
    /// Select the best epoch by mean validation score.
    Select {
        /// Run directory containing config.json and the score log.
        #[arg(long)]
        run: PathBuf,
    },
    /// Evaluate the selected checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Use the non-standard printed-formula average precision.
        #[arg(long)]
        pxap_printed: bool,
    },
    /// Export thresholded maps and boxes for a split.
    ExportMaps {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Full pipeline: data, pretraining, generator, selection, evaluation.
    RunAll {
        #[command(flatten)]
        common: CommonOpts,
    },
}

pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> CliError {
        CliError::Runtime(e)
    }
}

fn resolve_config(common: &CommonOpts) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Runtime)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: common.seed,
        method: common.method,
        lambda: common.lambda,
        no_inner: common.no_inner,
        no_outer: common.no_outer,
        no_reg: common.no_reg,
        out: common.out.clone(),
        data: common.data.clone(),
        target_mode: None,
    };
    overrides.apply(&mut cfg);
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn load_splits(cfg: &RunConfig) -> anyhow::Result<(Vec<synthdata::Sample>, Vec<synthdata::Sample>)> {
    let train = synthdata::load(&cfg.dataset_root, Split::Train)?;
    let val = synthdata::load(&cfg.dataset_root, Split::Val)?;
    Ok((train, val))
}

fn prepare_run(cfg: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("config.json"))?;
    super::ensure_dataset(cfg)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(seed) = common.seed {
                // for data generation the seed flag addresses the dataset
                cfg.dataset.seed = seed;
            }
            synthdata::generate(&cfg.dataset, &cfg.dataset_root)
                .map_err(|e| CliError::Runtime(e.into()))?;
            println!("dataset written to {}", cfg.dataset_root.display());
            Ok(())
        }
        Command::TrainClassifier { common } => {
            let cfg = resolve_config(&common)?;
            prepare_run(&cfg)?;
            let (train, val) = load_splits(&cfg)?;
            let path = train::train_classifier(&cfg, &train, &val)?;
            println!("classifier checkpoint: {}", path.display());
            Ok(())
        }
        Command::TrainEmbedder { common } => {
            let cfg = resolve_config(&common)?;
            prepare_run(&cfg)?;
            let (train, val) = load_splits(&cfg)?;
            let path = train::train_embedder(&cfg, &train, &val)?;
            println!("embedder checkpoint: {}", path.display());
            Ok(())
        }
        Command::TrainGenerator { common, f_checkpoint } => {
            let cfg = resolve_config(&common)?;
            prepare_run(&cfg)?;
            let (train, val) = load_splits(&cfg)?;
            let f = train::load_frozen_f(&cfg, f_checkpoint.as_deref())?;
            train::train_generator(&cfg, &f, &train, &val)?;
            println!("generator checkpoints in {}", cfg.generator_dir().display());
            Ok(())
        }
        Command::Select { run } => {
            let cfg = RunConfig::load(&run.join("config.json"))?;
            let scores = eval::read_scores(&cfg.generator_dir().join("scores.csv"))?;
            let idx = crate::stopping::select_checkpoint(&scores)
                .map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;
            let marker = cfg.generator_dir().join("SELECTED");
            std::fs::write(
                &marker,
                format!("# seed={}\nepoch={}\n", cfg.seed, scores[idx].epoch),
            )
            .map_err(|e| CliError::Runtime(e.into()))?;
            println!("selected epoch {} (mean S {})", scores[idx].epoch, scores[idx].mean_s);
            Ok(())
        }
        Command::Evaluate { run, pxap_printed } => {
            let mode = if pxap_printed { PxApMode::Printed } else { PxApMode::Standard };
            let report = eval::select_and_evaluate(&run, mode)?;
            print_report(&report);
            Ok(())
        }
        Command::ExportMaps { run, split } => {
            let split: Split = split.parse().map_err(|e| CliError::Usage(format!("{e}")))?;
            let dir = eval::export_maps(&run, split)?;
            println!("maps written to {}", dir.display());
            Ok(())
        }
        Command::RunAll { common } => {
            let cfg = resolve_config(&common)?;
            let report = train::run_all(&cfg)?;
            print_report(&report);
            Ok(())
        }
    }
}

fn print_report(report: &eval::Report) {
    println!("method {}  seed {}  selected epoch {}", report.method, report.seed, report.selected_epoch);
    println!("  gt_known_loc    {:.4}", report.metrics.gt_known_loc);
    println!("  top1_loc        {:.4}", report.metrics.top1_loc);
    println!("  top1_cls        {:.4}", report.metrics.top1_cls);
    println!("  px_ap           {:.4}", report.metrics.px_ap);
    println!("  mean_s_selected {:.4}", report.metrics.mean_s_selected);
}

/// Parse arguments and dispatch; maps errors to process exit codes
/// (0 ok, 1 runtime error, 2 usage error).
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
