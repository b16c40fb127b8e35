use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gdsd_lab::exec::RayonExecutor;
use gdsd_lab::run::{load, run, Invocation};

/// Train, verify and analyze guided denoiser self-distillation on toy tasks.
#[derive(Parser, Debug)]
#[command(name = "gdsd-lab", version)]
struct Cli {
    /// train, verify or tim; overrides `command` in the config file.
    command: Option<String>,
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Write reward.csv and loss.csv next to the metrics.
    #[arg(long)]
    emit_plot_data: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let inv = Invocation {
        command: cli.command,
        config: cli.config,
        sets: cli.set,
        out: cli.out,
        seed: cli.seed,
        emit_plot_data: cli.emit_plot_data,
    };
    let cfg = match load(&inv) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let exec = match RayonExecutor::from_env() {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match run(&cfg, &exec) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
