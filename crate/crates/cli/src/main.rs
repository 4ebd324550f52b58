//! `latent-cot`: data generation, training, evaluation, interpretability
//! sweeps and the compressibility report.

mod commands;
mod config;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use latent_cot::training::{Preset, TrainRegime};

use output::NumList;

const EXIT_CODES: &str = "\
Exit status:
  0  success
  1  other failure (I/O, internal)
  2  usage error
  3  malformed config or input
  4  missing input file or run directory
  5  checkpoint or format version mismatch
  6  numerical failure (non-finite loss or parameters)
  7  no correctly answered examples to analyze";

#[derive(Parser)]
#[command(name = "latent-cot", version, about = "Latent chain-of-thought on modular recurrences", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Task, model and training selection shared by `gen` and `train`.
#[derive(Args, Clone)]
pub struct RunArgs {
    /// TOML experiment config; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// paper or desk [default: desk]
    #[arg(long)]
    pub preset: Option<Preset>,
    /// codi, full-cot or non-cot [default: codi]
    #[arg(long)]
    pub regime: Option<TrainRegime>,
    /// Modulus.
    #[arg(long)]
    pub m: Option<u32>,
    /// Additive constant.
    #[arg(long)]
    pub b: Option<u32>,
    /// Hop count n; lengths 1..=n+1 are generated [default: 2].
    #[arg(long)]
    pub hops: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    /// Latent steps.
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub no_distill: bool,
    #[arg(long)]
    pub no_teacher: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/test splits as JSONL in every layout the regime uses.
    Gen(RunArgs),
    /// Train one model, or one per (regime, modulus) with --sweep-m.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Moduli to sweep, e.g. 41..50.
        #[arg(long)]
        sweep_m: Option<NumList>,
        /// Comma-separated regimes for a sweep.
        #[arg(long)]
        regimes: Option<String>,
    },
    /// Answer accuracy of trained runs as a regime-by-modulus table.
    Eval {
        /// Single run directory (repeatable).
        #[arg(long)]
        run: Vec<PathBuf>,
        /// Directory of runs named <regime>-m<m>.
        #[arg(long)]
        runs: Option<PathBuf>,
        #[arg(long)]
        sweep_m: Option<NumList>,
        #[arg(long)]
        regimes: Option<String>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Logit lens, attention, probes and patching on a trained run.
    Analyze(AnalyzeArgs),
    /// Unit probabilities, suffix-length law, lemma checks and simulation.
    Theory {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Moduli.
        #[arg(long)]
        m: Option<NumList>,
        /// Horizons T.
        #[arg(long = "T")]
        horizons: Option<NumList>,
        /// Monte Carlo trials per (m, T).
        #[arg(long)]
        trials: Option<u64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// An accuracy.csv written by eval, joined onto theory.csv by modulus.
        #[arg(long)]
        accuracy: Option<PathBuf>,
        #[arg(long, default_value = "theory")]
        out: PathBuf,
    },
    /// Index every manifest under a directory into report.json and report.md.
    Report {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
    },
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Trained run directory.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any of lens, attention, probes, patching.
    #[arg(long)]
    pub tool: Option<String>,
    /// Symbols such as s2,x1; defaults to every state.
    #[arg(long)]
    pub targets: Option<String>,
    /// Instance length T; defaults to the longest trained length.
    #[arg(long)]
    pub length: Option<usize>,
    /// Number of held-out instances to run.
    #[arg(long)]
    pub examples: Option<usize>,
    /// 1-indexed inputs to corrupt for patching; defaults to all.
    #[arg(long)]
    pub corrupt: Option<NumList>,
    /// Average the lens over the embedding depth too.
    #[arg(long)]
    pub include_pre: bool,
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    /// Also write the residual cache.
    #[arg(long)]
    pub save_activations: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let command_line = std::env::args().skip(1).collect::<Vec<_>>().join(" ");
    let result = match cli.command {
        Command::Gen(run) => commands::gen(&run, &command_line),
        Command::Train { run, sweep_m, regimes } => commands::train(&run, sweep_m, regimes.as_deref(), &command_line),
        Command::Eval {
            run,
            runs,
            sweep_m,
            regimes,
            out,
        } => commands::eval(&run, runs.as_deref(), sweep_m, regimes.as_deref(), &out, &command_line),
        Command::Analyze(a) => commands::analyze(&a, &command_line),
        Command::Theory {
            config,
            m,
            horizons,
            trials,
            seed,
            accuracy,
            out,
        } => commands::theory(config.as_deref(), m, horizons, trials, seed, accuracy.as_deref(), &out, &command_line),
        Command::Report { dir } => commands::report(&dir),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(output::exit_code(&e));
    }
}
