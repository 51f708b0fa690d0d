//! Command-line front end: synthetic data generation, training, evaluation,
//! gradient checking and dependency/motion map dumps.
//!
//! Exit codes: 0 on success, 2 on a configuration or data error, 3 on a
//! numerical failure (non-finite values or a failed gradient check).

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lstrl_core::{Error, Result};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "lstrl", version, about = "Video re-identification with appearance and motion blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Model layout shorthands.
#[derive(Debug, Args, Clone, Default)]
pub struct ModelFlags {
    /// baseline | +mae | +mae+bme
    #[arg(long, allow_hyphen_values = true)]
    pub variant: Option<String>,
    /// Removes one appearance granularity: A1..A4.
    #[arg(long = "ablate-granularity", value_name = "A1..A4")]
    pub ablate_granularity: Option<String>,
    /// Motion pairing manner: local | global.
    #[arg(long)]
    pub motion: Option<String>,
    /// Motion directions: single | bi.
    #[arg(long)]
    pub direction: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Renders the synthetic dataset under `data.root`.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Replaces an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Trains on the train split, writing checkpoints and a log to `out.dir`.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Resumes from this training checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Overwrites an existing run in `out.dir`.
        #[arg(long)]
        force: bool,
    },
    /// Scores query against gallery and writes the report to `out.dir`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Runs the finite-difference gradient suites at f64.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Only suites whose name contains this string.
        #[arg(long)]
        only: Option<String>,
        /// Scales the backward pass of the named op (negative control).
        #[arg(long = "corrupt-op", hide = true)]
        corrupt_op: Option<String>,
    },
    /// Dumps the dependency matrices and motion maps of one clip.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        /// Model parameters; freshly initialized weights if absent.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Tracklet directory holding `frame_*.lst` files.
        #[arg(long, value_name = "DIR")]
        clip: PathBuf,
        /// Output directory for the dumps.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

/// Resolves defaults, the config file, `--set` overrides and shorthand flags,
/// in that order of increasing precedence.
pub fn resolve_config(common: &Common, model: Option<&ModelFlags>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(m) = model {
        let pairs = [
            ("model.variant", &m.variant),
            ("model.drop_granularity", &m.ablate_granularity),
            ("model.motion", &m.motion),
            ("model.direction", &m.direction),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Executes a parsed command line, writing human-readable output to `out`.
pub fn execute(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    match cli.command {
        Command::Generate { common, force } => {
            let cfg = resolve_config(&common, None)?;
            commands::generate(&cfg, force, out).map(|_| ())
        }
        Command::Train {
            common,
            model,
            checkpoint,
            force,
        } => {
            let cfg = resolve_config(&common, Some(&model))?;
            commands::train(&cfg, checkpoint.as_deref(), force, out).map(|_| ())
        }
        Command::Eval {
            common,
            model,
            checkpoint,
        } => {
            let cfg = resolve_config(&common, Some(&model))?;
            commands::eval(&cfg, &checkpoint, out).map(|_| ())
        }
        Command::Gradcheck {
            common,
            only,
            corrupt_op,
        } => {
            let cfg = resolve_config(&common, None)?;
            let results = commands::gradcheck(&cfg, only.as_deref(), corrupt_op.as_deref(), out)?;
            match results.iter().filter(|r| !r.passed).map(|r| r.name).collect::<Vec<_>>() {
                failed if failed.is_empty() => Ok(()),
                failed => Err(Error::Numerical(format!(
                    "gradient check failed for {}",
                    failed.join(", ")
                ))),
            }
        }
        Command::Inspect {
            common,
            model,
            checkpoint,
            clip,
            out: dir,
        } => {
            let cfg = resolve_config(&common, Some(&model))?;
            commands::inspect(&cfg, checkpoint.as_deref(), &clip, &dir, out).map(|_| ())
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
