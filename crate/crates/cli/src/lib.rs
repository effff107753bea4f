//! The `smart` command line: argument parsing, config merging and dispatch.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{Mode, Model, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "smart", version, about = "Quantitative T1rho mapping from undersampled k-space")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: current directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; falls back to SMART_THREADS, then all cores.
    #[arg(long, global = true, env = "SMART_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the numerical phantom and its ground-truth maps.
    Simulate {
        #[arg(long, value_enum)]
        model: Option<Model>,
    },
    /// Build a sampling mask; with --input, also undersample that series.
    Mask {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Reconstruct an image series and T1rho map from k-space.
    Recon {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        coils: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Fully sampled series; enables metrics and error images.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        dump_patches: bool,
        #[arg(long)]
        dump_tissues: bool,
        /// Error-image amplification (default 10).
        #[arg(long)]
        amplify_error: Option<f64>,
    },
    /// Fit a mono-exponential T1rho map to an image series.
    Fit {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Monte-Carlo Hankel rank sweep over SNR.
    RankExperiment {
        #[arg(long, value_enum)]
        model: Option<Model>,
        /// Runs per SNR level; 1000 matches the original experiment.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Compare two series (or two maps): nRMSE, PSNR, SSIM, HFEN.
    Metrics {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

impl Cli {
    /// Loads the config file (if any) and applies the flags on top.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.global.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let g = &self.global;
        if g.seed.is_some() {
            cfg.seed = g.seed;
        }
        if g.out.is_some() {
            cfg.paths.out = g.out.clone();
        }
        let paths = &mut cfg.paths;
        match &self.command {
            Command::Simulate { model } | Command::RankExperiment { model, .. } if model.is_some() => {
                if cfg.phantom.spec.is_some() {
                    return Err(CliError::config("--model conflicts with phantom.spec in the config"));
                }
                cfg.phantom.model = model.unwrap();
            }
            _ => {}
        }
        match &self.command {
            Command::Mask { input } | Command::Fit { input } => override_path(&mut paths.input, input),
            Command::Recon { input, coils, mode, reference, amplify_error, .. } => {
                override_path(&mut paths.input, input);
                override_path(&mut paths.coils, coils);
                override_path(&mut paths.reference, reference);
                if mode.is_some() {
                    cfg.mode = *mode;
                }
                if let Some(a) = amplify_error {
                    cfg.amplify_error = *a;
                }
            }
            Command::Metrics { input, reference } => {
                override_path(&mut paths.input, input);
                override_path(&mut paths.reference, reference);
            }
            Command::RankExperiment { runs: Some(r), .. } => cfg.rank_experiment.runs = *r,
            _ => {}
        }
        if !(cfg.amplify_error > 0.0 && cfg.amplify_error.is_finite()) {
            return Err(CliError::config("amplify_error must be positive"));
        }
        Ok(cfg)
    }
}

fn override_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let cfg = cli.resolve()?;
    match &cli.command {
        Command::Simulate { .. } => commands::simulate(&cfg),
        Command::Mask { .. } => commands::mask(&cfg),
        Command::Recon { dump_patches, dump_tissues, .. } => commands::recon(&cfg, *dump_patches, *dump_tissues),
        Command::Fit { .. } => commands::fit(&cfg),
        Command::RankExperiment { .. } => commands::rank(&cfg),
        Command::Metrics { .. } => commands::metrics(&cfg),
    }
}
