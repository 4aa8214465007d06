mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

impl From<impute_core::Error> for CliError {
    fn from(e: impute_core::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "impute", version, about = "Impute a missing MRI contrast from the other three")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset split 3:1:1.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Defaults to $MIST_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoints and loss_log.csv.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Print the effective configuration as JSON and exit.
        #[arg(long)]
        print_config: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Generate the target contrast from the other three.
    Impute {
        #[command(flatten)]
        model: commands::ModelInputs,
        /// ref:<pgm>, latent:<seed>, mean or mean:<DOMAIN>.
        #[arg(long, default_value = "mean")]
        style: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a style path between two domain mean styles.
    Interpolate {
        #[command(flatten)]
        model: commands::ModelInputs,
        #[arg(long)]
        from_domain: String,
        #[arg(long)]
        to_domain: String,
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        /// Output directory for one PGM per alpha and alphas.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: metrics.csv, style_table.json, embedding.csv.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "PHANTOM")]
        cohort: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { out, n, size, seed } => commands::gen_data(&out, n, size, seed),
        Command::Train {
            data,
            config,
            out,
            resume,
            print_config,
            seed,
            iterations,
        } => {
            let flags = config::Overrides {
                data,
                out,
                seed,
                iterations,
            };
            let cfg = config::RunConfig::resolve(config.as_deref(), config::env_seed()?, &flags)?;
            if print_config {
                print!("{}", cfg.to_json());
                return Ok(());
            }
            commands::train(&cfg, resume)
        }
        Command::Impute { model, style, out } => commands::impute(&model, &style, &out),
        Command::Interpolate {
            model,
            from_domain,
            to_domain,
            step,
            out,
        } => commands::interpolate(&model, &from_domain, &to_domain, step, &out),
        Command::Eval { ckpt, data, out, cohort } => commands::eval(&ckpt, &data, &out, &cohort),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
