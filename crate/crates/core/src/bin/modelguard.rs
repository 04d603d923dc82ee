//! Command-line front end for the extraction-monitoring experiment harness.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use modelguard::harness::{
    cmd_defend_eval, cmd_evasion, cmd_monitor_replay, cmd_project, cmd_sweep, cmd_train,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "modelguard",
    about = "Model-extraction monitoring experiments: train detectors, sweep \
             alarm thresholds, and evaluate attacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config JSON; desk-scale defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for checkpoints and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Dotted config override, e.g. --set monitor.window=50 (repeatable).
    #[arg(long = "set", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier, the detector VAE, and the latent reference.
    Train,
    /// Run all evaluation streams and tabulate alarms per threshold.
    Sweep,
    /// Compare substitute accuracy and transferability with and without blocking.
    DefendEval,
    /// Emit 3-component PCA coordinates of the latent embedding sets.
    Project,
    /// Run the latent-evasion step-size grid and perturbed-stream report.
    Evasion,
    /// Replay the configured stream through the monitor.
    MonitorReplay,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load_with_overrides(path, &cli.sets)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => {
            let mut value = serde_json::to_value(ExperimentConfig::desk_scale(0))?;
            for set in &cli.sets {
                modelguard::harness::apply_override(&mut value, set)?;
            }
            serde_json::from_value(value)?
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Train => cmd_train(&cfg, &cli.out)?,
        Command::Sweep => cmd_sweep(&cfg, &cli.out)?,
        Command::DefendEval => cmd_defend_eval(&cfg, &cli.out)?,
        Command::Project => cmd_project(&cfg, &cli.out)?,
        Command::Evasion => cmd_evasion(&cfg, &cli.out)?,
        Command::MonitorReplay => cmd_monitor_replay(&cfg, &cli.out)?,
    }
    Ok(())
}
