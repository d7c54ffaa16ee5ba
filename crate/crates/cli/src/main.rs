use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use hot_cli::{default_out, execute, exit_code, load_config, CliError, Command, EXIT_CONFIG};

/// High-order attention verification and benchmark runner.
#[derive(Parser)]
#[command(name = "hot", version)]
struct Args {
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the base seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `out/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the oracle token cap.
    #[arg(long)]
    cap: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("hot: {e}");
            ExitCode::from(EXIT_CONFIG as u8)
        }
    }
}

fn run(args: &Args) -> Result<i32, CliError> {
    let mut cfg = load_config(&args.config)?;
    if cfg.command != args.command {
        return Err(CliError::Config(format!(
            "config is for `{}`, invoked as `{}`",
            cfg.command.name(),
            args.command.name()
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(cap) = args.cap {
        cfg.oracle_cap = cap;
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    let out = default_out(&cfg);
    let report = execute(&cfg, &out)?;
    for a in &report.assertions {
        println!(
            "{} {} value={:e} threshold={:e}",
            if a.pass { "PASS" } else { "FAIL" },
            a.name,
            a.value,
            a.threshold
        );
    }
    println!("wrote {}", out.display());
    Ok(exit_code(&report))
}
