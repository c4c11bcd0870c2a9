mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Run(String),
    #[error("verification failed")]
    Verify,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) | CliError::Verify => 1,
        }
    }
}

impl From<cocmt::sim::SimError> for CliError {
    fn from(e: cocmt::sim::SimError) -> Self {
        match e {
            cocmt::sim::SimError::Config(m) => CliError::Config(m),
            other => CliError::Run(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cocmt", version, about = "Cooperative query-fusion perception: simulation, training, ablations and verification")]
struct Cli {
    /// JSON run config; missing keys take the defaults listed below, unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for scene sampling and model initialization.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Queries sent per CAV. `bandwidth` also takes `start:end:step` or a comma list.
    #[arg(long, global = true, value_name = "K")]
    k: Option<String>,
    /// Feature width D.
    #[arg(long = "D", global = true, value_name = "D")]
    dim: Option<usize>,
    /// Class count C.
    #[arg(long = "C", global = true, value_name = "C")]
    classes: Option<usize>,
    /// PCM distance threshold in meters, or `inf`.
    #[arg(long, global = true)]
    tau: Option<String>,
    /// SSM confidence threshold.
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// Fixed agent count per scene, ego included.
    #[arg(long, global = true)]
    agents: Option<usize>,
    /// Number of evaluation scenes.
    #[arg(long, global = true)]
    scenes: Option<usize>,
    /// Model checkpoint to read (simulate, ablate).
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Full-size dimensions: D=256, N=900, k=50.
    #[arg(long, global = true)]
    paper_parity: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the cooperative pipeline over the seed set; writes detections.csv, metrics.csv and pr_curve.svg.
    Simulate,
    /// Print payload size in bits and Mb.
    Bandwidth,
    /// Mask, tau and inference-k ablation grid for a trained checkpoint.
    Ablate,
    /// Run the property suite; exit 1 on any failure.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
        /// Monte-Carlo samples per IoU pair.
        #[arg(long, hide = true)]
        iou_samples: Option<usize>,
    },
    /// Train the toy model; writes the checkpoint and a JSONL loss log.
    Train {
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn parse_cli() -> Cli {
    let defaults = RunConfig::default().to_json();
    let cmd = Cli::command().after_long_help(format!("Default config:\n{defaults}"));
    let matches = cmd.get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn effective_config(cli: &Cli, k_single: bool) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let k = match (&cli.k, k_single) {
        (Some(s), true) => Some(s.trim().parse::<usize>().map_err(|e| CliError::Config(format!("--k `{s}`: {e}")))?),
        _ => None,
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        k,
        dim: cli.dim,
        classes: cli.classes,
        tau: cli.tau.clone(),
        theta: cli.theta,
        agents: cli.agents,
        scenes: cli.scenes,
        checkpoint: cli.checkpoint.clone(),
        paper_parity: cli.paper_parity,
    })?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Simulate => commands::simulate(&effective_config(cli, true)?),
        Cmd::Bandwidth => {
            let cfg = effective_config(cli, false)?;
            let ks = match &cli.k {
                Some(s) => commands::parse_k_sweep(s)?,
                None => vec![cfg.sim.k as u64],
            };
            print!("{}", commands::bandwidth_table(&ks, cfg.sim.model.dim as u64, cfg.sim.model.classes as u64));
            Ok(())
        }
        Cmd::Ablate => commands::ablate(&effective_config(cli, true)?),
        Cmd::Verify { inject_fault, iou_samples } => commands::verify(cli.seed.unwrap_or(0), inject_fault.as_deref(), *iou_samples),
        Cmd::Train { steps } => {
            let mut cfg = effective_config(cli, true)?;
            if let Some(s) = steps {
                cfg.train.steps = *s;
            }
            commands::train(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = parse_cli();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
