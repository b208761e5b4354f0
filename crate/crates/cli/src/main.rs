use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use liprcp_cli::commands::{self, Command};
use liprcp_cli::config::RunConfig;

/// Lipschitz-robust conformal prediction experiments.
#[derive(Parser)]
#[command(name = "liprcp", version)]
struct Cli {
    /// TOML configuration file. Without one, defaults are used.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set alpha=0.05 --set attack.steps=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Run invariant checks; exit nonzero if any fails.
    #[arg(long, global = true)]
    check: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Write a Gaussian-mixture dataset.
    Synth,
    /// Train an orthogonal GroupSort network on the rows outside cal/eval/test.
    Train,
    /// Calibrate the conformal threshold on the cal split.
    Calibrate,
    /// Vanilla prediction sets on the test split.
    Predict,
    /// Conservative and restrictive sets at radius `epsilon`.
    RobustPredict,
    /// Certified coverage band on the eval split.
    Audit,
    /// PGD coverage sweep on the test split, checked against the band.
    AttackEval,
    /// Quantile-shift certificate and poisoning-robust threshold.
    PoisonCertify,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Synth => Command::Synth,
            Cmd::Train => Command::Train,
            Cmd::Calibrate => Command::Calibrate,
            Cmd::Predict => Command::Predict,
            Cmd::RobustPredict => Command::RobustPredict,
            Cmd::Audit => Command::Audit,
            Cmd::AttackEval => Command::AttackEval,
            Cmd::PoisonCertify => Command::PoisonCertify,
        }
    }
}

fn run(cli: &Cli) -> Result<bool> {
    liprcp_cli::init_threads()?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let report = commands::run(cli.cmd.into(), &cfg, cli.check)?;
    println!("{}", report.to_json());
    Ok(report.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: invariant checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
