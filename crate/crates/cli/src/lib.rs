//! Command implementations behind the `cascade-ct` binary.
//!
//! Every command returns an exit code: 0 on success, 1 on runtime failure,
//! 2 on configuration or validation failure.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod experiment;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<cascade_ct::Error> for CliError {
    fn from(e: cascade_ct::Error) -> Self {
        use cascade_ct::Error as E;
        let code = match e {
            E::Config(_) | E::Domain(_) | E::MissingExtractor { .. } | E::Unmatched(_) | E::Geometry { .. } => {
                EXIT_CONFIG
            }
            _ => EXIT_RUNTIME,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cascade-ct", version, about = "Low-dose CT denoising with cascaded networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Configuration shared by every command.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; keys missing from the file keep defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set simulation.n_slices=20`.
    /// Repeatable; applied after the file. Run `cascade-ct keys` to list keys.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self, extra: &[String]) -> CliResult<RunConfig> {
        let mut all = self.overrides.clone();
        all.extend_from_slice(extra);
        RunConfig::load(self.config.as_deref(), &all)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate paired LDCT/NDCT slices into ldct/ and ndct/ plus a manifest.
    Simulate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the configured cascade on a paired dataset directory.
    Train {
        /// Dataset directory with ldct/ and ndct/ subdirectories.
        #[arg(long)]
        data: PathBuf,
        /// Model directory; completed levels found here are reused.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Denoise F32R slices with a trained model. PNG previews follow
    /// `evaluation.panels`.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        /// An F32R file or a directory of them.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Blend weights for the LDCT input and the prediction (sets
        /// `evaluation.blend`).
        #[arg(long, num_args = 2, value_names = ["W_LDCT", "W_PRED"], allow_negative_numbers = true)]
        blend: Option<Vec<f64>>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a model on a paired dataset and emit report.json and panels.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run a named comparison end to end on synthetic data.
    Experiment {
        /// One of: drl_vs_cnn10, hybrid_vs_wu, cascade_depth, blending.
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// List every configuration key with its resolved value.
    Keys {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate { out, cfg } => commands::simulate(&cfg.load(&[])?, &out),
        Command::Train { data, out, cfg } => commands::train(&cfg.load(&[])?, &data, &out),
        Command::Denoise {
            model,
            input,
            out,
            blend,
            cfg,
        } => {
            let mut extra = Vec::new();
            if let Some(w) = blend {
                extra.push(format!("evaluation.blend=[{},{}]", w[0], w[1]));
            }
            commands::denoise(&cfg.load(&extra)?, &model, &input, &out)
        }
        Command::Evaluate { model, data, out, cfg } => commands::evaluate(&cfg.load(&[])?, &model, &data, &out),
        Command::Experiment { name, out, cfg } => {
            let kind = experiment::Experiment::parse(&name)?;
            experiment::run(kind, &cfg.load(&[])?, &out)
        }
        Command::Keys { cfg } => {
            println!("{}", cfg.load(&[])?.key_listing());
            Ok(())
        }
    }
}
