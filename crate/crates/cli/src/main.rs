//! `faultline`: train models, compute attributions, run fault injection
//! campaigns and fault-aware training, and summarise the results.
//!
//! Exit status: 0 success, 2 configuration error, 3 data or format error,
//! 4 runtime failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use faultline::fault_model::{ExperimentCode, TargetKind};
use faultline::{Error, ErrorClass, Result};

use crate::config::{parse_thresholds, DatasetConfig, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "faultline",
    version,
    about = "Bit-flip fault injection for small neural networks"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. They override config-file values.
#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; repeat for several campaign seeds.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    budget: Option<usize>,
    /// Experiment code such as GBINo or RBRNw.
    #[arg(long, global = true)]
    code: Option<ExperimentCode>,
    /// Comma-separated SDC thresholds, e.g. 0,0.05,0.1.
    #[arg(long, global = true)]
    thresholds: Option<String>,
    /// Probability of a uniform draw mixed into importance sampling.
    #[arg(long, global = true)]
    mix: Option<f64>,
    /// Dataset manifest; replaces the configured dataset.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train,
    /// Score fault targets of a checkpoint.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        /// neuron_output (o) or neuron_weight (w).
        #[arg(long)]
        target: TargetKind,
    },
    /// Inject sampled faults and record accuracy drops.
    Campaign {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        attribution: Option<PathBuf>,
        /// Continue an interrupted run from its partial output.
        #[arg(long)]
        resume: bool,
        /// Write 0 for every wallclock column.
        #[arg(long)]
        no_timing: bool,
        /// Inject every site of the code's target once instead of sampling.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Fault-aware training; writes models, faults and a report to --out.
    Fat,
    /// Summarise one or more record files.
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
}

fn exit_status(err: &Error) -> u8 {
    match err.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Runtime => 4,
    }
}

fn class_name(err: &Error) -> &'static str {
    match err.class() {
        ErrorClass::Config => "config",
        ErrorClass::Data => "data",
        ErrorClass::Runtime => "runtime",
    }
}

/// Config file (or defaults) with flags applied on top.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let mut cfg = RunConfig::load(path)?;
            if let (DatasetConfig::Manifest { path: m }, Some(dir)) =
                (&mut cfg.dataset, path.parent())
            {
                if m.is_relative() {
                    *m = dir.join(&*m);
                }
            }
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(path) = &common.dataset {
        cfg.dataset = DatasetConfig::Manifest { path: path.clone() };
    }
    if let Some(&seed) = common.seeds.first() {
        cfg.train.seed = seed;
        cfg.attribution.seed = seed;
        cfg.fat.seed = seed;
        cfg.campaign.seeds = common.seeds.clone();
    }
    if let Some(w) = common.workers {
        cfg.campaign.workers = w;
    }
    if let Some(b) = common.budget {
        cfg.campaign.budget = b;
    }
    if let Some(code) = common.code {
        cfg.campaign.code = Some(code);
        cfg.fat.code = code;
    }
    if let Some(t) = &common.thresholds {
        let t = parse_thresholds(t)?;
        cfg.campaign.thresholds = t.clone();
        cfg.fat.thresholds = t;
    }
    if let Some(m) = common.mix {
        cfg.campaign.mix = m;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let out = cli
        .common
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required".into()));
    match cli.command {
        Command::Train => commands::train(&cfg, &out?),
        Command::Attribute { checkpoint, target } => {
            commands::attribute(&cfg, &checkpoint, target, &out?)
        }
        Command::Campaign {
            checkpoint,
            attribution,
            resume,
            no_timing,
            exhaustive,
        } => {
            let opts = commands::CampaignOptions {
                checkpoint,
                attribution,
                resume,
                no_timing,
                exhaustive,
            };
            commands::campaign(&cfg, &opts, &out?)
        }
        Command::Fat => commands::fat(&cfg, &out?),
        Command::Report { records } => commands::report(&cfg, &records, &out?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", class_name(&e));
            ExitCode::from(exit_status(&e))
        }
    }
}
