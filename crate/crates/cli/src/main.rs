//! `reslink`: train, evaluate and inspect ResLink classifiers.
//!
//! Exit codes: 0 success, 1 verification failure or numeric fault,
//! 2 configuration or I/O error, 3 incompatible checkpoint.

mod commands;
mod config;
mod plot;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "reslink", version, about = "Residual CNN with area attention for CT slice classification")]
struct Cli {
    /// Worker threads for batch-parallel kernels. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split data, train, and write metrics, report, curves and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest CSV or a class-per-directory tree.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write report.csv and report.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print `path,class_name,probability` for each image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Finite-difference check of every backward pass, in f64 and f32.
    Gradcheck {
        /// Run config whose `[model]` section sizes the composed-model check.
        #[arg(long)]
        config: Option<PathBuf>,
        /// First of the five seeds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write a synthetic two-class dataset as class-per-directory PNGs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1250)]
        n_per_class: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long)]
        seed: u64,
    },
}

/// A failure carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn verification(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<reslink::Error> for CliError {
    fn from(e: reslink::Error) -> Self {
        use reslink::Error as E;
        let code = match &e {
            E::Checkpoint(_) => 3,
            E::NumericFault(_) => 1,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train { config, seed, out } => commands::train(&config, seed, out),
        Command::Evaluate {
            checkpoint,
            data,
            out,
        } => commands::evaluate(&checkpoint, &data, out.as_deref()),
        Command::Predict { checkpoint, images } => commands::predict(&checkpoint, &images),
        Command::Gradcheck {
            config,
            seed,
            inject_fault,
        } => commands::gradcheck(config.as_deref(), seed, inject_fault.as_deref()),
        Command::Synth {
            out,
            n_per_class,
            height,
            width,
            seed,
        } => commands::synth(&out, n_per_class, height, width, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = e.message.replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::from(e.code)
        }
    }
}
