//! Command-line front end: `dap <collect|train|eval|ablate|report>`.

mod config;
mod pipeline;

pub use config::{RunConfig, VERSION};
pub use pipeline::{Datasets, EvalOutcome, Pipeline, TrainArm, Validation};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dap", version, about = "Dynamics-aligned flow matching policies on 2D manipulation toys")]
pub struct Cli {
    /// Run configuration (`[section]` + `key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training and sampler seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out expert and random policies and write the datasets.
    Collect,
    /// Fit one model: dynamics, policy-dap, policy-fmp, video or dynamics-expert-only.
    Train { which: String },
    /// Success rates, validation MSEs, extrapolation curve and step sweep.
    Eval,
    /// Variant by perturbation success table; trains missing models first.
    Ablate,
    /// Merge metrics into a markdown summary.
    Report,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Invariant(_) => EXIT_INVARIANT,
        _ => EXIT_DATA,
    }
}

pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    println!("{VERSION} config sha256 {}", cfg.hash());
    let p = Pipeline::new(cfg);
    match &cli.command {
        Command::Collect => {
            let d = p.collect()?;
            println!(
                "collected {} expert and {} random episodes into {}",
                d.expert.train.len() + d.expert.validation.len(),
                d.random.train.len() + d.random.validation.len(),
                p.out().join("data").display()
            );
        }
        Command::Train { which } => {
            let arm = TrainArm::parse(which)?;
            let (_, log) = p.train(arm)?;
            if let Some(last) = log.last() {
                println!("{}: {} epochs, final train loss {:.6}", arm.name(), log.len(), last.train_loss);
            }
            println!("wrote {}", p.model_path(arm).display());
        }
        Command::Eval => {
            let o = p.eval()?;
            for r in o.report.rows.iter().filter(|r| r.metric == "success_rate") {
                println!("{} {} success {:.3}", r.variant, r.ood, r.value);
            }
            if !o.violations.is_empty() {
                return Err(Error::Invariant(o.violations.join("; ")));
            }
        }
        Command::Ablate => {
            let r = p.ablate()?;
            for row in r.rows.iter().filter(|r| r.metric == "success_rate") {
                println!("{} {} success {:.3}", row.variant, row.ood, row.value);
            }
        }
        Command::Report => {
            println!("wrote {}", p.report()?.display());
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
