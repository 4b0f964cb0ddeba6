//! `vat` — pipeline entry point: corpus generation, consistency filtering,
//! two-stage training, sampling, and evaluation, driven by one TOML config
//! and a single global seed.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use vat_core::config::RunConfig;

#[derive(Parser)]
#[command(name = "vat", about = "attribute-transfer pipeline", version)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output root (also via VAT_OUT_DIR).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural image corpus and its manifest.
    GenData,
    /// Run range-sensitive consistency filtering over the subject tree.
    Filter,
    /// Stage one: train the image autoencoder and the text-conditioned
    /// denoising backbone.
    Pretrain,
    /// Stage two: train the reference adapter with the base frozen.
    TrainAdapter,
    /// Generate one image from a subject and tagged reference records.
    Sample {
        /// Target subject (leaf id from the taxonomy).
        subject: String,
        /// Reference slots as RECORD_ID=TAG (repeatable, up to N).
        #[arg(long = "ref", value_name = "ID=TAG")]
        refs: Vec<String>,
        /// Sampling seed (defaults to the global seed).
        #[arg(long)]
        sample_seed: Option<u64>,
        /// Output PNG path.
        #[arg(long, default_value = "sample.png")]
        out: PathBuf,
        /// Checkpoint directory (defaults to the adapter checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the evaluation protocol and write the report + contact sheets.
    Eval {
        /// Checkpoint directory (defaults to the adapter checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Skip the decomposition and combination sections.
        #[arg(long)]
        quick: bool,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    } else if let Ok(dir) = std::env::var("VAT_OUT_DIR") {
        cfg.out_dir = PathBuf::from(dir);
    }
    cfg.resolve_seeds();
    Ok(cfg)
}

fn main() {
    let cli = Cli::parse();
    let result = (|| -> anyhow::Result<()> {
        let cfg = load_config(&cli)?;
        match &cli.cmd {
            Cmd::GenData => commands::gen_data(&cfg),
            Cmd::Filter => commands::filter(&cfg),
            Cmd::Pretrain => commands::pretrain(&cfg),
            Cmd::TrainAdapter => commands::train_adapter(&cfg),
            Cmd::Sample {
                subject,
                refs,
                sample_seed,
                out,
                checkpoint,
            } => commands::sample(
                &cfg,
                subject,
                refs,
                sample_seed.unwrap_or(cfg.seed),
                out,
                checkpoint.as_deref(),
            ),
            Cmd::Eval { checkpoint, quick } => {
                commands::eval(&cfg, checkpoint.as_deref(), *quick)
            }
        }
    })();
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
