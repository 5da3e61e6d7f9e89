//! Command-line surface: import, synth, train, sample, evaluate, ablate.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowdiff_core::CoreError;

pub use config::RunConfig;

/// Errors carrying the process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::Schedule(_)
            | CoreError::TimestepRange { .. }
            | CoreError::Plan(_)
            | CoreError::Config(_)
            | CoreError::Training(_) => CliError::Config(e.to_string()),
            CoreError::Numerical { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "flowdiff",
    about = "Diffusion-based surrogate for 2-D airfoil flow fields",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the config-driven subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field: --set training.iterations=100 (repeatable).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Override the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        let mut config = RunConfig::load(&self.config, &overrides)?;
        if let Some(out) = &self.out {
            config.out_root = out.clone();
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert an unpacked upstream archive into the neutral sample format.
    Import {
        /// Unpacked archive directory (cases.csv + case_*/rep_*.npy).
        #[arg(long)]
        archive: PathBuf,
        /// Destination dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic analytic dataset into data.root.
    Synth(ConfigArgs),
    /// Train the denoiser; writes checkpoints and the loss log to a run dir.
    Train(ConfigArgs),
    /// Generate flow fields for a given condition from a checkpoint.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to sample from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reynolds number.
        #[arg(long)]
        re: f64,
        /// Angle of attack in degrees.
        #[arg(long)]
        alpha: f64,
        /// Take the geometry mask from this sample file (defaults to the
        /// synthetic obstacle).
        #[arg(long)]
        mask_from: Option<PathBuf>,
        /// Ensemble size (defaults to evaluation.ensemble_size).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Evaluate a checkpoint on the dataset's test cases.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dump predicted mean/spread fields per case.
        #[arg(long)]
        dump_fields: bool,
    },
    /// Train and evaluate the ablation variant matrix, emitting the combined
    /// relative-change table.
    Ablate(ConfigArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Import { archive, out } => commands::import::run(&archive, &out),
        Command::Synth(args) => args.load().and_then(|c| commands::synth::run(&c)),
        Command::Train(args) => args.load().and_then(|c| commands::train::run(&c)),
        Command::Sample {
            config,
            checkpoint,
            re,
            alpha,
            mask_from,
            count,
        } => config
            .load()
            .and_then(|c| commands::sample::run(&c, &checkpoint, re, alpha, mask_from.as_deref(), count)),
        Command::Evaluate {
            config,
            checkpoint,
            dump_fields,
        } => config
            .load()
            .and_then(|c| commands::evaluate::run(&c, &checkpoint, dump_fields)),
        Command::Ablate(args) => args.load().and_then(|c| commands::ablate::run(&c)),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
