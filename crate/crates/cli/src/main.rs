//! `gscc`: train, prune, and analyze networks with the graph-based
//! self-competition pruning agent.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod cmd;

#[derive(Parser)]
#[command(name = "gscc", version, about = "Structured channel pruning with a graph RL agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset file.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Samples per class (split later via data.per_class settings).
        #[arg(long, default_value_t = 24)]
        per_class: usize,
    },
    /// Train the dense reference network; writes weights and an epoch log.
    TrainBaseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "gscc-out/baseline")]
        out: PathBuf,
    },
    /// Pretrain the graph encoder with the autoencoder objective.
    PretrainGae {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "gscc-out/gae")]
        out: PathBuf,
    },
    /// Train the pruning agent; writes a policy checkpoint and episode logs.
    TrainAgent {
        #[arg(long)]
        config: PathBuf,
        /// Encoder checkpoint from `pretrain-gae` to initialize from.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        #[arg(long, default_value = "gscc-out/agent")]
        out: PathBuf,
    },
    /// Extract a mask with a trained policy and materialize the pruned net.
    Prune {
        #[arg(long)]
        policy: PathBuf,
        /// Trained network manifest (e.g. from `train-baseline`).
        #[arg(long)]
        net: PathBuf,
        /// Run config for data/env/oracle settings; defaults if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "gscc-out/prune")]
        out: PathBuf,
    },
    /// CMA-ES mask search for comparison against the agent.
    EsBaseline {
        #[arg(long)]
        config: PathBuf,
        /// Optional policy checkpoint to include an agent row in the report.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value = "gscc-out/es")]
        out: PathBuf,
    },
    /// Compare two masks: similarity metrics plus per-layer sparsity.
    Analyze {
        #[arg(long)]
        mask_a: PathBuf,
        #[arg(long)]
        mask_b: PathBuf,
        #[arg(long)]
        net: PathBuf,
        #[arg(long, default_value = "gscc-out/analyze")]
        out: PathBuf,
    },
    /// Top-1 accuracy of a network (optionally masked) on a dataset file.
    Eval {
        #[arg(long)]
        net: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "gscc-out/eval")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    match cmd::run(cli.command, &argv.join(" ")) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
