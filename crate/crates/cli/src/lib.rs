//! `plmap` command-line front end.

pub mod commands;
pub mod config;
pub mod error;
pub mod provenance;
pub mod svg;
pub mod verify;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use plmap_core::preprocess::FeatureOptions;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::provenance::Invocation;

#[derive(Debug, Parser)]
#[command(name = "plmap", version, about = "Synthetic path-loss maps: generate, train, cross-validate, ablate")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Replaces the scene, split and training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for label generation and feature building.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Ablation {
    /// Zero the distance channel.
    #[arg(long)]
    pub no_dist: bool,
    /// Replace the weighting mask by ones.
    #[arg(long)]
    pub no_mask: bool,
}

impl Ablation {
    fn options(&self) -> FeatureOptions {
        FeatureOptions {
            use_distance: !self.no_dist,
            use_mask: !self.no_mask,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FoldScheme {
    /// Leave one transmitter out.
    ByTx,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene, oracle labels and a dataset bundle.
    Gen,
    /// Train one model on the bundle's training split.
    Train {
        /// Dataset bundle written by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Leave-one-Tx-out cross-validation.
    Cv {
        /// Dataset bundle written by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "by-tx")]
        folds: FoldScheme,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Cross-validate the full model and both channel ablations.
    Ablate {
        /// Dataset bundle written by `gen`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint and time inference.
    Eval {
        /// Dataset bundle written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Network checkpoint written by `train` or `cv`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on this transmitter instead of the validation split.
        #[arg(long)]
        tx: Option<usize>,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Check output checksums, optionally re-running the recorded command.
    Verify {
        /// Directory holding provenance.json; defaults to --out.
        dir: Option<PathBuf>,
        /// Re-run the command and compare the regenerated outputs.
        #[arg(long)]
        regenerate: bool,
    },
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::fs::canonicalize(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::usage("--config is required for this command"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::new("runtime", e.to_string()))?;
    }
    let inv = match &cli.command {
        Command::Verify { dir, regenerate } => {
            return verify::verify(dir.as_deref().unwrap_or(&cli.out), *regenerate);
        }
        Command::Gen => Invocation::Gen,
        Command::Train { data, ablation } => Invocation::Train {
            data: absolute(data)?,
            options: ablation.options(),
        },
        Command::Cv { data, folds, ablation } => {
            let FoldScheme::ByTx = folds;
            Invocation::Cv {
                data: absolute(data)?,
                options: ablation.options(),
            }
        }
        Command::Ablate { data } => Invocation::Ablate { data: absolute(data)? },
        Command::Eval {
            data,
            checkpoint,
            tx,
            ablation,
        } => Invocation::Eval {
            data: absolute(data)?,
            checkpoint: absolute(checkpoint)?,
            tx: *tx,
            options: ablation.options(),
        },
    };
    let cfg = load_config(cli)?;
    commands::run(&inv, &cfg, &cli.out)?;
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", CliError::usage(first.trim_start_matches("error: ")).line());
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
