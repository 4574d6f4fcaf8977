//! Command-line front end: scenario synthesis, learning, incentive design,
//! poisoning attacks, event/customer valuation, and frequency simulation,
//! all driven by a JSON config plus a seed and emitting flat-file
//! artifacts.

pub mod config;
pub mod output;
pub mod pipeline;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};

use crate::config::AppConfig;
use crate::output::{write_json, OutputFormat};
use crate::pipeline::StageContext;

#[derive(Debug, Parser)]
#[command(
    name = "adrsim",
    about = "Simulator for learning-based demand response programs, poisoning attacks on their training data, and the grid-frequency consequences"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed for every random draw in the run.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Format of tabular artifacts.
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a scenario and write its history and ground truth.
    Synth,
    /// Fit per-customer response models from a history.
    Learn {
        /// Existing history CSV; a scenario is synthesized when omitted.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Design the incentive for the current estimates.
    Incentive {
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Plan and simulate a poisoning attack on the learning loop.
    Attack {
        /// Number of events in the attack window.
        #[arg(long)]
        horizon: Option<usize>,
        /// Fraction of customers compromised.
        #[arg(long)]
        compromised_frac: Option<f64>,
    },
    /// Rank one customer's recorded events by marginal learning value.
    ValueEvents {
        #[arg(long)]
        history: Option<PathBuf>,
        /// Monte-Carlo permutations; defaults to 1000 per event.
        #[arg(long)]
        m_permutations: Option<usize>,
    },
    /// Rank customers by how well their model explains the aggregate.
    ValueCustomers {
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Push a tampered incentive through the demand profile and the
    /// frequency surrogate.
    Gridsim {
        /// Multiplier applied to the benign incentive.
        #[arg(long)]
        lambda_factor: Option<f64>,
    },
    /// Run the whole pipeline: synthesis, learning, valuation, the
    /// monetary attack, and the frequency study.
    ReplicateCaseStudy,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Learn { .. } => "learn",
            Command::Incentive { .. } => "incentive",
            Command::Attack { .. } => "attack",
            Command::ValueEvents { .. } => "value-events",
            Command::ValueCustomers { .. } => "value-customers",
            Command::Gridsim { .. } => "gridsim",
            Command::ReplicateCaseStudy => "replicate-case-study",
        }
    }
}

/// Run failures, split by exit code: validation problems exit 2, runtime
/// problems exit 1.
#[derive(Debug)]
pub enum RunError {
    Validation(String),
    Runtime(String),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Validation(msg) => write!(f, "validation error: {msg}"),
            RunError::Runtime(msg) => write!(f, "runtime error: {msg}"),
        }
    }
}

impl std::error::Error for RunError {}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) => 2,
            RunError::Runtime(_) => 1,
        }
    }
}

impl From<adrsim_core::Error> for RunError {
    fn from(err: adrsim_core::Error) -> Self {
        match err {
            adrsim_core::Error::Io(_) | adrsim_core::Error::Csv(_) => {
                RunError::Runtime(err.to_string())
            }
            _ => RunError::Validation(err.to_string()),
        }
    }
}

/// What a run produced: the resolved config echo, a content hash of the
/// inputs, the artifact paths, and a per-subcommand summary.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub subcommand: String,
    pub seed: u64,
    pub format: OutputFormat,
    pub out_dir: String,
    pub input_hash: String,
    pub config: AppConfig,
    pub artifacts: Vec<String>,
    pub summary: serde_json::Value,
}

fn load_config(path: Option<&Path>) -> Result<AppConfig, RunError> {
    match path {
        None => Ok(AppConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                RunError::Validation(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str(&text).map_err(|e| {
                RunError::Validation(format!("config {} is invalid: {e}", path.display()))
            })
        }
    }
}

fn input_hash(config: &AppConfig, seed: u64, history: Option<&Path>) -> Result<String, RunError> {
    let mut hasher = Sha256::new();
    let config_bytes = serde_json::to_vec(config)
        .map_err(|e| RunError::Runtime(format!("config serialization failed: {e}")))?;
    hasher.update(&config_bytes);
    hasher.update(seed.to_le_bytes());
    if let Some(path) = history {
        let bytes = std::fs::read(path).map_err(|e| {
            RunError::Validation(format!("cannot read history {}: {e}", path.display()))
        })?;
        hasher.update(&bytes);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Executes one subcommand end to end and writes `report.json` into the
/// output directory.
pub fn run(cli: &Cli) -> Result<RunReport, RunError> {
    let mut config = load_config(cli.config.as_deref())?;
    // Fold command-line overrides into the config before anything runs so
    // the echoed document alone reproduces the run.
    match &cli.command {
        Command::Attack {
            horizon,
            compromised_frac,
        } => {
            if let Some(h) = horizon {
                config.attack.horizon = *h;
            }
            if let Some(f) = compromised_frac {
                config.attack.compromised_frac = *f;
            }
        }
        Command::ValueEvents { m_permutations, .. } => {
            if m_permutations.is_some() {
                config.valuation.m_permutations = *m_permutations;
            }
        }
        Command::Gridsim { lambda_factor } => {
            if let Some(f) = lambda_factor {
                config.grid.lambda_factor = *f;
            }
        }
        _ => {}
    }

    std::fs::create_dir_all(&cli.out)
        .map_err(|e| RunError::Runtime(format!("cannot create {}: {e}", cli.out.display())))?;

    let history_arg = match &cli.command {
        Command::Learn { history }
        | Command::Incentive { history }
        | Command::ValueEvents { history, .. }
        | Command::ValueCustomers { history } => history.as_deref(),
        _ => None,
    };
    let hash = input_hash(&config, cli.seed, history_arg)?;

    let mut ctx = StageContext::new(&config, cli.seed, &cli.out, cli.format);
    let summary = match &cli.command {
        Command::Synth => {
            let scenario = pipeline::synth_stage(&mut ctx)?;
            serde_json::json!({
                "customers": scenario.customers.len(),
                "events": scenario.history.len(),
                "commitment_kw": adrsim_core::round_sig9(scenario.aggregator.commitment_d),
            })
        }
        Command::Learn { history } => pipeline::learn_stage(&mut ctx, history.as_deref())?,
        Command::Incentive { history } => {
            pipeline::incentive_stage(&mut ctx, history.as_deref())?
        }
        Command::Attack { .. } => pipeline::attack_stage(&mut ctx)?.summary,
        Command::ValueEvents { history, .. } => {
            pipeline::value_events_stage(&mut ctx, history.as_deref())?
        }
        Command::ValueCustomers { history } => {
            pipeline::value_customers_stage(&mut ctx, history.as_deref())?
        }
        Command::Gridsim { .. } => pipeline::gridsim_stage(&mut ctx)?,
        Command::ReplicateCaseStudy => pipeline::replicate_stage(&mut ctx)?,
    };
    let artifacts: Vec<String> = ctx
        .artifacts
        .iter()
        .map(|p| p.display().to_string())
        .collect();
    drop(ctx);

    let report = RunReport {
        subcommand: cli.command.name().to_string(),
        seed: cli.seed,
        format: cli.format,
        out_dir: cli.out.display().to_string(),
        input_hash: hash,
        config,
        artifacts,
        summary,
    };
    let report_path = cli.out.join("report.json");
    write_json(&report_path, &report)?;
    Ok(report)
}
