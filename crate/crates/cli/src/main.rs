//! `lambda`: dangling detection and entity alignment experiments.
//!
//! Exit codes: 0 success, 1 usage or configuration error (or a failed
//! verification), 2 no convergence, 3 pair not alignable.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lambda_core::oracles::Suite;

use commands::{Outcome, Setting};
use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "lambda", version, about = "Dangling-aware knowledge graph entity alignment")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set model.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory; overrides `out` in the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Estimate the matchable share and flag dangling entities.
    Detect(ConfigArgs),
    /// Train the alignment model and align predicted-matchable entities.
    Align {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Detection report to use (default: <out>/detection.json).
        #[arg(long)]
        detection: Option<PathBuf>,
        /// Align even when the pair was judged not alignable.
        #[arg(long)]
        force: bool,
    },
    /// Recompute the metrics of an `align` run.
    Eval {
        /// Output directory of the run.
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory with the ground truth.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_enum, default_value = "relaxed")]
        setting: Setting,
        /// Also write metrics.json here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic pair from the `[synth]` section.
    Synth(ConfigArgs),
    /// Run an oracle suite: lemmas, pu, gradients, structure, metrics or all.
    Verify {
        suite: String,
        /// Also write verify.json here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let load = |a: &ConfigArgs| ExperimentConfig::load(&a.config, &a.sets);
    match cli.cmd {
        Cmd::Detect(a) => commands::detect(&load(&a)?, a.out),
        Cmd::Align { cfg, detection, force } => commands::align_cmd(&load(&cfg)?, cfg.out, detection, force),
        Cmd::Eval { run, truth, setting, out } => commands::eval(&run, &truth, setting, out),
        Cmd::Synth(a) => commands::synth(&load(&a)?, a.out),
        Cmd::Verify { suite, out } => commands::verify(suite.parse::<Suite>()?, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LAMBDA_LOG", level)).init();
    match run(cli) {
        Ok(o) => ExitCode::from(o.code()),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
