use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::error;
use mgl_core::config::ExperimentConfig;
use mgl_core::pipeline;

#[derive(Parser)]
#[command(name = "mgl", version, about = "Multimodal graph learning deepfake detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults to the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the dataset root (holds `train/` and `eval/`).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and eval splits.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output root; defaults to the config's data dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace existing splits.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train on `<data dir>/train` and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score every video of a split and print the report as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; defaults to `<data dir>/eval`.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score one video with per-frame detail.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; defaults to `<data dir>/eval`.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        sample: String,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.data_dir {
        cfg.data.dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn checkpoint_path<'a>(cfg: &'a ExperimentConfig, flag: &'a Option<PathBuf>) -> &'a Path {
    flag.as_deref().unwrap_or(&cfg.checkpoint)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out, overwrite } => {
            let cfg = load_config(&common)?;
            let splits = pipeline::cmd_generate(&cfg, out.as_deref(), overwrite)?;
            print_json(&splits)
        }
        Command::Train { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let summary = pipeline::cmd_train(&cfg, checkpoint.as_deref())?;
            print_json(&summary)
        }
        Command::Eval { common, checkpoint, split, out } => {
            let cfg = load_config(&common)?;
            let report = pipeline::cmd_eval(&cfg, checkpoint_path(&cfg, &checkpoint), split.as_deref())?;
            let json = report.to_json();
            if let Some(path) = out {
                std::fs::write(&path, &json).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{json}");
            Ok(())
        }
        Command::Infer { common, checkpoint, split, sample } => {
            let cfg = load_config(&common)?;
            let result = pipeline::cmd_infer(&cfg, checkpoint_path(&cfg, &checkpoint), split.as_deref(), &sample)?;
            print_json(&result)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
