use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "sbgc", version, about = "Likelihood-based generative classifiers on toy data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON config file; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_enum)]
    pub sde: Option<SdeArg>,
    #[arg(long, global = true, value_enum)]
    pub trace: Option<TraceArg>,
    /// Hutchinson probe count.
    #[arg(long, global = true)]
    pub probes: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum SdeArg {
    Vp,
    Subvp,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum TraceArg {
    Exact,
    Hutchinson,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Linf,
    L2,
    Both,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Dataset file (default: <out-dir>/test.sbgc).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint path, or `analytic` for the exact scores of the configured
    /// mixture (default: <out-dir>/model.sbgc).
    #[arg(long)]
    pub model: Option<String>,
    /// Use at most this many samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train and test datasets.
    GenData,
    /// Train a conditional score network with denoising score matching.
    Train {
        /// Training set (default: <out-dir>/train.sbgc).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Per-sample, per-class log-likelihoods.
    Likelihood {
        #[command(flatten)]
        eval: EvalArgs,
        /// Condition on this class only; unconditional if `none`.
        #[arg(long)]
        class: Option<String>,
    },
    /// Classify by conditional likelihood.
    Classify {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// PGD attacks on the classifier.
    Attack {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_enum, default_value = "both")]
        norm: NormArg,
    },
    /// Accuracy over the corruption grid.
    CorruptEval {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Log-likelihood along segments between sample pairs.
    Interpolate {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Accuracy and likelihoods as a function of the probe count.
    TraceConvergence {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Collect the summaries in the output directory into one report.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli.global, &cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
