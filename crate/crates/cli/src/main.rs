use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zsl_cli::config::parse_ks;
use zsl_cli::{commands, tune, CliError, CliResult, Method};
use zsl_core::eval::Scope;

/// Zero-shot learning: synthesize data, train, evaluate and tune.
#[derive(Parser)]
#[command(name = "zsl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model bundle.
    Train {
        /// rectify, amssfe or graphzsl
        method: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a bundle on a dataset's test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// czsl or gzsl
        #[arg(long, default_value = "czsl")]
        scope: String,
        /// Comma-separated cutoffs, e.g. 1,5
        #[arg(long, default_value = "1")]
        k: String,
    },
    /// Grid search on held-out seen classes.
    Tune {
        method: String,
        #[arg(long)]
        data: PathBuf,
        /// Grid file, or a preset name such as amssfe-wide
        #[arg(long)]
        grid: String,
    },
}

fn run(cli: Cli) -> CliResult<Vec<String>> {
    match cli.command {
        Command::Synth { spec, out } => commands::synth(&spec, &out),
        Command::Train { method, data, config, out } => commands::train(method.parse::<Method>()?, &data, &config, &out),
        Command::Eval { model, data, scope, k } => {
            let scope: Scope = scope.parse().map_err(|e: zsl_core::ZslError| CliError::config(e.to_string()))?;
            let ks = parse_ks(&k).map_err(CliError::config)?;
            commands::eval(&model, &data, scope, &ks)
        }
        Command::Tune { method, data, grid } => tune::tune(method.parse::<Method>()?, &data, &grid),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
