use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use racmf::pipeline::{self, CommandOutput, ExperimentConfig, SEED_ENV};
use racmf::synth::Split;

#[derive(Parser)]
#[command(name = "racmf", version, about = "Region-adaptive MeanFlow CT enhancement pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON or TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `rollout.K=4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory (default: <output_dir>/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic degraded/clean pairs and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the conditional flow backbone.
    TrainBackbone {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the refinement controller against a frozen backbone.
    TrainController {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
    },
    /// Enhance a split; without --controller only coarse steps run.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        controller: Option<PathBuf>,
        /// Defaults to `eval.split`.
        #[arg(long)]
        split: Option<Split>,
    },
    /// Image quality, radiomic agreement and NPS of enhanced outputs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory written by `enhance`.
        #[arg(long)]
        enhanced: PathBuf,
        #[arg(long)]
        split: Option<Split>,
    },
    /// Radial noise power spectra of input, enhanced and target images.
    Nps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory written by `enhance`.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        split: Option<Split>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let seed = std::env::var(SEED_ENV).ok();
    let cfg = pipeline::load_config(common.config.as_deref(), &common.set, seed.as_deref())
        .context("loading configuration")?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output_dir.join(name))
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn run(cli: Cli) -> Result<CommandOutput> {
    let mut report = progress;
    let out = match &cli.command {
        Command::GenData { common } => {
            let cfg = load(common)?;
            pipeline::cmd_gen_data(&cfg, &out_dir(common, &cfg, "gen-data"))?
        }
        Command::TrainBackbone { common, manifest } => {
            let cfg = load(common)?;
            pipeline::cmd_train_backbone(&cfg, manifest, &out_dir(common, &cfg, "train-backbone"), &mut report)?
        }
        Command::TrainController {
            common,
            manifest,
            backbone,
        } => {
            let cfg = load(common)?;
            let dir = out_dir(common, &cfg, "train-controller");
            pipeline::cmd_train_controller(&cfg, manifest, backbone, &dir, &mut report)?
        }
        Command::Enhance {
            common,
            manifest,
            backbone,
            controller,
            split,
        } => {
            let cfg = load(common)?;
            let dir = out_dir(common, &cfg, "enhance");
            let split = split.unwrap_or(cfg.eval.split);
            pipeline::cmd_enhance(&cfg, manifest, backbone, controller.as_deref(), split, &dir)?
        }
        Command::Eval {
            common,
            manifest,
            enhanced,
            split,
        } => {
            let cfg = load(common)?;
            let split = split.unwrap_or(cfg.eval.split);
            pipeline::cmd_eval(&cfg, manifest, enhanced, split, &out_dir(common, &cfg, "eval"))?
        }
        Command::Nps {
            common,
            manifest,
            images,
            split,
        } => {
            let cfg = load(common)?;
            let split = split.unwrap_or(cfg.eval.split);
            pipeline::cmd_nps(&cfg, manifest, images, split, &out_dir(common, &cfg, "nps"))?
        }
    };
    Ok(out)
}

/// 2 for bad input, 3 for broken internal contracts.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<racmf::Error>()) {
        Some(e) if !e.is_user_error() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            for m in &out.messages {
                println!("{m}");
            }
            println!("run directory: {}", out.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
