use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use twinseg::harness::{
    emit_reports, plan, run_experiment, validate_paper_preset, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "twinseg", version, about = "Federated segmentation simulator with per-client twins")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the cohort, train, fine-tune twins and write every report.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Named preset used when no config file is given.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate and print the resolved plan without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Rebuild reports of a finished run from its checkpoints.
    EmitReports {
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a config file, or the 128³ preset model when none is given.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Skip the 128³ forward pass.
        #[arg(long)]
        no_forward: bool,
    },
}

fn resolve(
    config: Option<PathBuf>,
    preset: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> anyhow::Result<ExperimentConfig> {
    let mut resolved = match (config, preset) {
        (Some(path), _) => ExperimentConfig::load(&path)?,
        (None, Some(name)) => ExperimentConfig::preset(&name)?,
        (None, None) => bail!("either --config <path> or --preset <name> is required"),
    };
    if let Some(seed) = seed {
        resolved.seed = seed;
    }
    if let Some(out) = out {
        resolved.output_dir = out;
    }
    resolved.validate()?;
    Ok(resolved)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Run {
            config,
            preset,
            seed,
            out,
            dry_run,
        } => {
            let config = resolve(config, preset, seed, out)?;
            if dry_run {
                let plan = plan(&config)?;
                println!(
                    "{}",
                    serde_json::to_string_pretty(&serde_json::json!({ "config": config, "plan": plan }))?
                );
                return Ok(ExitCode::SUCCESS);
            }
            let outcome = run_experiment(&config)
                .with_context(|| format!("run in {}", config.output_dir.display()))?;
            println!("run complete: {} (config {})", outcome.dir.display(), outcome.config_hash);
        }
        Command::EmitReports { out } => {
            let summary = emit_reports(&out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Validate { config: Some(path), .. } => {
            let config = ExperimentConfig::load(&path)?;
            println!("{} is valid (config {})", path.display(), config.hash());
        }
        Command::Validate { config: None, no_forward } => {
            let report = validate_paper_preset(!no_forward);
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
