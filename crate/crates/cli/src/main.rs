//! `mteo`: train, distill, sample, evaluate and analyse from the command line.

mod analyze;
mod context;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mteo_core::Error;

use crate::context::Ctx;

#[derive(Parser)]
#[command(name = "mteo", version, about = "Multi-layer time embedding optimization on a planar mixture")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file with `[section]` headers and `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set mteo.lr=0.01`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory for artifacts, reports and manifests.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Global seed; replaces `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the denoiser on exact mixture draws.
    TrainBackbone,
    /// Integrate teacher trajectories for the training and held-out seeds.
    GenTeachers,
    /// Distill the embedding bank against the teacher trajectories.
    TrainMteo,
    /// Write endpoint samples of the student sampler.
    Sample,
    /// Score vanilla and bank samplers against exact mixture draws.
    Eval,
    /// Diagnostics over trained artifacts.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
}

#[derive(Subcommand, Clone, Copy)]
pub enum Analysis {
    /// Conditioning-time sweep of every student step.
    Sweep,
    /// Per-block conditioning-time sweep of the analysed step.
    LayerSweep,
    /// PCA of per-block feature trajectories along a dense run.
    FeaturePca,
    /// FiLM capacity probe on the analysed step.
    Film,
    /// PCA of vanilla and optimized conditioning vectors.
    EmbPca,
    /// Gain and drop views of step importance.
    GainDrop,
    /// Apply the bank on a refined schedule.
    StepTransfer,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainBackbone => "train-backbone",
            Command::GenTeachers => "gen-teachers",
            Command::TrainMteo => "train-mteo",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::Analyze { what } => match what {
                Analysis::Sweep => "analyze-sweep",
                Analysis::LayerSweep => "analyze-layer-sweep",
                Analysis::FeaturePca => "analyze-feature-pca",
                Analysis::Film => "analyze-film",
                Analysis::EmbPca => "analyze-emb-pca",
                Analysis::GainDrop => "analyze-gain-drop",
                Analysis::StepTransfer => "analyze-step-transfer",
            },
        }
    }
}

fn run(cli: Cli) -> mteo_core::Result<()> {
    let mut ctx = Ctx::new(cli.command.name(), cli.config.as_deref(), &cli.overrides, cli.seed, cli.out)?;
    match cli.command {
        Command::TrainBackbone => pipeline::train_backbone(&mut ctx)?,
        Command::GenTeachers => pipeline::gen_teachers(&mut ctx)?,
        Command::TrainMteo => pipeline::train_mteo(&mut ctx)?,
        Command::Sample => pipeline::sample(&mut ctx)?,
        Command::Eval => pipeline::eval(&mut ctx)?,
        Command::Analyze { what } => analyze::run(&mut ctx, what)?,
    }
    ctx.finish()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Missing(_) => 3,
        Error::Fingerprint { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
