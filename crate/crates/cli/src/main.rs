//! `myops <command> [options]`
//!
//! Settings come from the defaults, then `--config`, then `--desk-scale`,
//! then the individual flags, then `MYOPS_WORKDIR`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use myops_core::nn::Arch;
use myops_core::pipeline::{run, PipelineConfig, PipelineError, COMMANDS};

#[derive(Debug, Parser)]
#[command(name = "myops", version, about = "Cardiac MRI pathology segmentation pipeline")]
struct Cli {
    /// One of synth, convert, augment, train, predict, evaluate, gradcheck, all.
    command: String,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// 64×64 crops, 30 epochs, 5 warps.
    #[arg(long)]
    desk_scale: bool,
    /// Train only this block (0-4).
    #[arg(long)]
    block: Option<usize>,
    /// Architecture of the single-model blocks.
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    warps: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
}

fn config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if cli.desk_scale {
        cfg = cfg.desk_scale();
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.arch {
        cfg.train.arch = v;
    }
    if let Some(v) = cli.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = cli.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = cli.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = cli.warps {
        cfg.warps_per_slice = v;
    }
    if let Some(v) = cli.crop {
        cfg.crop_size = v;
    }
    cfg.apply_env();
    Ok(cfg)
}

fn diagnostic(command: &str, e: &PipelineError) -> String {
    let stage = match e {
        PipelineError::Stage { stage, .. } => stage,
        _ => command,
    };
    serde_json::json!({ "command": command, "stage": stage, "kind": e.kind(), "message": e.to_string() }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if !COMMANDS.contains(&cli.command.as_str()) {
        eprintln!("{}", diagnostic(&cli.command, &PipelineError::UnknownCommand(cli.command.clone())));
        eprintln!("commands: {}", COMMANDS.join(", "));
        return ExitCode::from(2);
    }
    let result = config(&cli).and_then(|cfg| run(&cli.command, &cfg, cli.block));
    match result {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", diagnostic(&cli.command, &e));
            match e {
                PipelineError::Config(_) | PipelineError::UnknownCommand(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
