use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wintent::cli;
use wintent::training::Phase;
use wintent::Result;

/// Workflow-intention extraction: corpus generation, training, inference
/// and validation.
#[derive(Parser)]
#[command(name = "wintent", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus with known count tables.
    GenCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one phase and write a checkpoint plus JSON-lines metrics.
    Train {
        #[arg(long, value_parser = clap::value_parser!(Phase))]
        phase: Phase,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint to continue from (required after phase 1.1).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate an intention set for every sample.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss metrics and signal-space validators for a checkpoint.
    Validate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter counts of the large-scale configuration.
    ParamCount {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(args: Args) -> Result<()> {
    match args.command {
        Command::GenCorpus { config, seed, out } => {
            let cfg = cli::load_config(config.as_deref(), seed)?;
            let corpus = cli::cmd_gen_corpus(&cfg, &out)?;
            eprintln!("wrote {} samples, {} artefacts to {}", corpus.samples.len(), corpus.artefacts.len(), out.display());
        }
        Command::Train { phase, config, seed, corpus, checkpoint, out } => {
            let cfg = match (&config, seed) {
                (None, None) => None,
                _ => Some(cli::load_config(config.as_deref(), seed)?),
            };
            let ck = cli::cmd_train(phase, cfg.as_ref(), &corpus, checkpoint.as_deref(), &out)?;
            if let Some(last) = ck.history.last().and_then(|r| r.epochs.last()) {
                eprintln!("phase {phase}: final train loss {:.6}, accuracy {:.3}", last.train_loss, last.accuracy);
            }
        }
        Command::Infer { config, checkpoint, corpus, out } => {
            let cfg = config.as_deref().map(|p| cli::load_config(Some(p), None)).transpose()?;
            let records = cli::cmd_infer(cfg.as_ref(), &checkpoint, &corpus, &out)?;
            eprintln!("wrote intentions for {} samples", records.len());
        }
        Command::Validate { checkpoint, corpus, out } => {
            let report = cli::cmd_validate(&checkpoint, &corpus, &out)?;
            if let Some(p2) = &report.phase2 {
                eprintln!("coverage {:.3}, stop accuracy {:.3}", p2.metrics.coverage, p2.metrics.stop_accuracy);
            }
        }
        Command::ParamCount { out } => {
            let report = cli::cmd_param_count(out.as_deref())?;
            print!("{}", cli::format_param_table(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
