#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bimal_core::scenegen::Domain;
use bimal_core::trainer::SegMode;

#[derive(Parser, Debug)]
#[command(name = "bimal", version, about = "Flow-likelihood domain adaptation for toy street scenes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON file of flat dotted keys, e.g. {"optim.learning_rate": 3e-5}.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` config key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (eval: CSV file).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// KEY=VALUE config override, applied after --config. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labeled scene dataset.
    GenData {
        #[arg(long, value_parser = parse_domain)]
        domain: Domain,
        #[arg(long)]
        n: usize,
    },
    /// Fit the label-map flow on a source dataset.
    TrainFlow {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the segmenter.
    TrainSeg {
        #[arg(long, value_parser = parse_mode)]
        mode: SegMode,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Labeled source validation set used for model selection.
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        flow_ckpt: Option<PathBuf>,
    },
    /// Append one metrics row for a checkpoint on a dataset.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        seg_ckpt: Option<PathBuf>,
        /// Predict the ground truth itself.
        #[arg(long, conflicts_with = "seg_ckpt")]
        oracle: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        flow_ckpt: Option<PathBuf>,
    },
    /// Decode label maps from the flow and report how many are well formed.
    SampleFlow {
        #[arg(long)]
        flow_ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0.7)]
        temperature: f64,
    },
    /// Finite-difference checks of every differentiable component.
    GradCheck {
        /// Std of the noise added to the identity-initialized check flow.
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
    },
}

fn parse_domain(s: &str) -> Result<Domain, String> {
    Domain::parse(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<SegMode, String> {
    SegMode::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { 0 });
        }
    };
    match commands::run(&cli.global, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
