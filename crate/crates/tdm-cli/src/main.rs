//! `tdm`: prepare data, train, evaluate, ablate, and run missing-data
//! sweeps for the diffusion recommender, with every run reproducible from a
//! single seed.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "tdm", version, about = "Diffusion-based sequential recommender with Thompson-sampled sequence editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct CommonOverrides {
    /// Flat key = value config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for all random substreams.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    /// Local value function: continuity|popularity|position|random.
    #[arg(long)]
    local_value: Option<String>,
    /// Global value function: stability|diversity|length|random.
    #[arg(long)]
    global_value: Option<String>,
    #[arg(long)]
    t_steps: Option<usize>,
    #[arg(long)]
    s_steps: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    attn_heads: Option<usize>,
    #[arg(long)]
    denoiser_hidden: Option<usize>,
    #[arg(long)]
    guidance_w: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a raw interaction file, filter it, and write dense-id splits.
    Prepare {
        /// Input text file: `user_id<TAB>item ids...`, one sequence per line.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop items with fewer global interactions than this.
        #[arg(long, default_value_t = 5)]
        min_item_freq: usize,
        /// Drop sequences shorter than this (after item filtering).
        #[arg(long, default_value_t = 3)]
        min_seq_len: usize,
        #[arg(long, default_value_t = 0.8)]
        train_frac: f64,
        #[arg(long, default_value_t = 0.1)]
        val_frac: f64,
        #[arg(long, default_value_t = 0.1)]
        test_frac: f64,
    },
    /// Generate a clustered synthetic dataset and write splits.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        sequences: usize,
        #[arg(long, default_value_t = 200)]
        items: u32,
        #[arg(long, default_value_t = 10)]
        clusters: u32,
        #[arg(long, default_value_t = 5)]
        len_min: usize,
        #[arg(long, default_value_t = 11)]
        len_max: usize,
        /// Fraction of history to delete per sequence, in [0, 1).
        #[arg(long, default_value_t = 0.0)]
        missing_ratio: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train a model on a prepared data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/last.ckpt` instead of starting fresh.
        #[arg(long, default_value_t = false)]
        resume: bool,
        #[command(flatten)]
        overrides: CommonOverrides,
    },
    /// Evaluate a checkpoint: HR@K and NDCG@K over several seeds.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which split of the data directory to score.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        /// Comma-separated guidance strengths; default is the trained value.
        #[arg(long)]
        w: Option<String>,
        /// Number of evaluation seeds.
        #[arg(long)]
        seeds: Option<usize>,
        /// Retrieval similarity: inner (default) or cosine.
        #[arg(long)]
        similarity: Option<String>,
        #[command(flatten)]
        overrides: CommonOverrides,
    },
    /// Train and compare editing variants under identical seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant tokens
        /// (base|wo-gl|wo-l|wo-g|w-p|w-i|w-d|w-s|tdm); default all nine.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        seeds: Option<usize>,
        #[command(flatten)]
        overrides: CommonOverrides,
    },
    /// Degradation curve: train and evaluate under injected missing data.
    SweepMissing {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated missing-data ratios.
        #[arg(long)]
        ratios: Option<String>,
        /// Number of training seeds per (variant, ratio).
        #[arg(long)]
        seeds: Option<usize>,
        /// Variants to compare; default tdm.
        #[arg(long)]
        variants: Option<String>,
        #[command(flatten)]
        overrides: CommonOverrides,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TDM_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("TDM_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            anyhow::bail!("TDM_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    init_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Prepare {
            input,
            out,
            min_item_freq,
            min_seq_len,
            train_frac,
            val_frac,
            test_frac,
        } => commands::prepare(
            &input,
            &out,
            min_item_freq,
            min_seq_len,
            train_frac,
            val_frac,
            test_frac,
        ),
        Command::Synth {
            out,
            sequences,
            items,
            clusters,
            len_min,
            len_max,
            missing_ratio,
            seed,
        } => commands::synth(
            &out,
            sequences,
            items,
            clusters,
            len_min,
            len_max,
            missing_ratio,
            seed,
        ),
        Command::Train {
            data,
            out,
            resume,
            overrides,
        } => commands::train(&data, &out, resume, &overrides),
        Command::Eval {
            checkpoint,
            data,
            out,
            split,
            k,
            w,
            seeds,
            similarity,
            overrides,
        } => commands::eval(&checkpoint, &data, &out, split, k, w, seeds, similarity, &overrides),
        Command::Ablate {
            data,
            out,
            variants,
            seeds,
            overrides,
        } => commands::ablate(&data, &out, variants, seeds, &overrides),
        Command::SweepMissing {
            data,
            out,
            ratios,
            seeds,
            variants,
            overrides,
        } => commands::sweep_missing(&data, &out, ratios, seeds, variants, &overrides),
    }
}
