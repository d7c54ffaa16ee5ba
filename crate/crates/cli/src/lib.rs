//! Verification suites, scaling benchmarks and synthetic ablations behind
//! the `hot` binary. Every command returns a [`Report`] of CSV tables and
//! named assertions.

pub mod commands;
pub mod config;
pub mod report;

use std::path::{Path, PathBuf};

use peak_alloc::PeakAlloc;
use thiserror::Error;

pub use config::{Command, RunConfig};
pub use report::{reproducible_outputs, Assertion, Cell, Report, Table};

/// Heap tracker behind the peak-memory columns of `bench`.
#[global_allocator]
pub static ALLOCATOR: PeakAlloc = PeakAlloc;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] hot_core::TensorError),
    #[error(transparent)]
    Attention(#[from] hot_core::AttentionError),
    #[error(transparent)]
    Kron(#[from] hot_core::KronError),
    #[error(transparent)]
    Layer(#[from] hot_model::LayerError),
    #[error(transparent)]
    Train(#[from] hot_model::TrainError),
}

/// Process exit status for a finished run: 0 when every assertion passes,
/// 1 on any breach.
pub fn exit_code(report: &Report) -> i32 {
    if report.passed() {
        0
    } else {
        1
    }
}

/// Exit status for a run that could not complete.
pub const EXIT_CONFIG: i32 = 2;

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    RunConfig::from_json(&text)
}

pub fn default_out(cfg: &RunConfig) -> PathBuf {
    cfg.out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.command.name()))
}

/// Runs the command of `cfg` with its section defaults filled in, without
/// touching the filesystem.
pub fn run(cfg: &RunConfig) -> Result<Report, CliError> {
    dispatch(cfg, None)
}

/// Runs the command and writes its CSV files, summaries and (for `train`)
/// checkpoint into `out`.
pub fn execute(cfg: &RunConfig, out: &Path) -> Result<Report, CliError> {
    std::fs::create_dir_all(out)?;
    let report = dispatch(cfg, Some(out))?;
    report.write(out)?;
    Ok(report)
}

fn dispatch(cfg: &RunConfig, out: Option<&Path>) -> Result<Report, CliError> {
    cfg.validate()?;
    let mut cfg = cfg.resolved();
    cfg.out = None;
    let echo = serde_json::to_value(&cfg)?;
    let (tables, assertions) = match cfg.command {
        Command::Equiv => commands::equiv::run(&cfg)?,
        Command::Gradcheck => commands::gradcheck::run(&cfg)?,
        Command::Kronrank => commands::kronrank::run(&cfg)?,
        Command::Bench => commands::bench::run(&cfg)?,
        Command::Ablate => commands::ablate::run(&cfg)?,
        Command::Train => commands::train::run(&cfg, out)?,
    };
    Ok(Report {
        command: cfg.command.name().to_string(),
        tables,
        assertions,
        config: echo,
    })
}
