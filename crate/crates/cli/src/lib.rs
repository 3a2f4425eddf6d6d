//! Command-line pipeline around `sidrec`: configuration, run directories and
//! the stage graph from synthetic data to evaluation reports.

pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;

use std::path::PathBuf;

use thiserror::Error;

use config::RunConfig;
use manifest::{RunLock, RunManifest};
use pipeline::{Run, Stage};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input: config, flags, missing or stale prerequisites.
    #[error("{0}")]
    Validation(String),
    /// Something failed while a stage was running.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub(crate) fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Global options shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct GlobalArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
    pub set: Vec<String>,
}

/// What to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Stage(Stage),
    /// `rl-train --resume`.
    ResumeRl,
    /// Every stage in order.
    All,
}

/// Loads the config, locks the run directory and runs `command`.
pub fn run(args: &GlobalArgs, command: Command) -> Result<(), CliError> {
    let config = RunConfig::load(args.config.as_deref(), &args.set, args.seed, args.run_dir.as_deref())?;
    let dir = config.run_dir.clone();
    if command == Command::Stage(Stage::Report) {
        // read-only over eval outputs; no config-driven stage to lock against
        report::write_report(&dir)?;
        return Ok(());
    }
    let _lock = RunLock::acquire(&dir)?;
    let mut run = Run {
        config: config.resolved(),
        manifest: RunManifest::load(&dir)?,
        dir,
    };
    match command {
        Command::Stage(s) => run.run_stage(s, false),
        Command::ResumeRl => run.run_stage(Stage::RlTrain, true),
        Command::All => {
            for s in Stage::PIPELINE {
                if s == Stage::Report {
                    report::write_report(&run.dir)?;
                } else {
                    run.run_stage(s, false)?;
                }
            }
            Ok(())
        }
    }
}
