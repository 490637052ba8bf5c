use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pdmp_cli::{parse_config, run_experiment, ExperimentConfig, ExperimentKind};

#[derive(Parser)]
#[command(name = "pdmp", version, about = "Simulate PDMPs, couple them and check convergence envelopes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides master-seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides replicas.
    #[arg(long)]
    replicas: Option<usize>,
    /// Overrides output-dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample trajectories from the first initial state.
    Simulate(Common),
    /// Sample coupled pairs and the distance curve.
    Couple(Common),
    /// Evaluate the theoretical envelope.
    Bounds(Common),
    /// Couple, evaluate the envelope and check the curve against it.
    FullCheck(Common),
    /// Audit the model's declared constants.
    Audit(Common),
}

fn load(common: &Common, kind: ExperimentKind) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(&common.config).map_err(|e| format!("{}: {e}", common.config.display()))?;
    let mut cfg = parse_config(&text).map_err(|e| format!("{}: {e}", common.config.display()))?;
    cfg.experiment = kind;
    if let Some(s) = common.seed {
        cfg.master_seed = s;
    }
    if let Some(n) = common.replicas {
        cfg.replicas = n;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, kind) = match &cli.command {
        Command::Simulate(c) => (c, ExperimentKind::Simulate),
        Command::Couple(c) => (c, ExperimentKind::Couple),
        Command::Bounds(c) => (c, ExperimentKind::Bounds),
        Command::FullCheck(c) => (c, ExperimentKind::FullCheck),
        Command::Audit(c) => (c, ExperimentKind::Audit),
    };
    let cfg = match load(common, kind) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_experiment(&cfg, common.workers) {
        Ok(report) => {
            print!("{}", report.summary);
            for f in &report.files {
                println!("wrote {} ({} bytes, sha256 {})", report.output_dir.join(&f.file).display(), f.bytes, f.sha256);
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
