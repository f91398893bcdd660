//! `entroprune`: train small vision transformers, find the attention layers
//! that matter least, dilute them to identity, and cut them out.

mod commands;
mod config;
mod error;
mod study;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::RunConfig;
use entroprune::tensor::Dtype;
use error::{CliError, Result};

#[derive(Parser)]
#[command(name = "entroprune", version, about)]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides [run] seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides [run] out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model dtype for new models; overrides [run] dtype.
    #[arg(long, global = true, value_parser = parse_dtype)]
    dtype: Option<Dtype>,
    #[command(subcommand)]
    command: Command,
}

fn parse_dtype(s: &str) -> std::result::Result<Dtype, String> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(format!("expected f32 or f64, got {other}")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Dataset tools.
    Dataset {
        #[command(subcommand)]
        action: DatasetCmd,
    },
    /// Train a dense model from scratch.
    Train,
    /// Top-1/top-5 accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled dataset; defaults to the [data] val path.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Per-layer entropy profile.
    Entropy {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Probe dataset; defaults to the [data] train path.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Choose attention layers to remove.
    Select {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Decay the mask on selected layers while training.
    Dilute {
        #[arg(long)]
        checkpoint: PathBuf,
        /// selection.json produced by `select`.
        #[arg(long)]
        selection: PathBuf,
    },
    /// Structurally remove fully diluted attention layers.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare two checkpoints feature by feature.
    Verify {
        #[arg(short = 'a', long)]
        a: PathBuf,
        #[arg(short = 'b', long)]
        b: PathBuf,
        /// Max abs deviation allowed; defaults to the dtype tolerance.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Frequency-band analysis of block outputs.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Second checkpoint to diff against (paper-style comparison).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Throughput and memory-bound proxy.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Byte budget for the memory-bound proxy (default 10 GiB).
        #[arg(long, default_value_t = 10 * 1024 * 1024 * 1024)]
        budget: u64,
    },
    /// Multi-run experiments.
    Study {
        #[command(subcommand)]
        action: StudyCmd,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Generate the synthetic benchmark (train + val files).
    Synth,
    /// Print dataset header and label histogram.
    Info { path: PathBuf },
}

#[derive(Subcommand)]
enum StudyCmd {
    /// Random-mask interaction study (accuracy and TE vs mask size).
    Masking {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated layer counts.
        #[arg(long, default_value = "1,2,3,4", value_delimiter = ',')]
        counts: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
    },
    /// select -> dilute -> fuse -> eval for every removal count.
    RemovalSweep {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Swap donor blocks into a host model and measure compatibility.
    Transplant {
        #[arg(long)]
        donor: PathBuf,
        #[arg(long)]
        host: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    // Apply the ENTROPRUNE_THREADS cap before any parallel work.
    let _ = entroprune::concurrency::threads();

    let need_config = || -> Result<RunConfig> {
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| CliError::Config("this command needs --config".into()))?;
        RunConfig::load(path, cli.seed, cli.out.clone(), cli.dtype)
    };
    let out_dir = || cli.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let seed = || cli.seed.unwrap_or(0);

    match &cli.command {
        Command::Dataset { action } => match action {
            DatasetCmd::Synth => commands::dataset_synth(&need_config()?),
            DatasetCmd::Info { path } => commands::dataset_info(path),
        },
        Command::Train => commands::train(&need_config()?),
        Command::Eval {
            checkpoint,
            dataset,
        } => commands::eval(&need_config()?, checkpoint, dataset.as_deref()),
        Command::Entropy {
            checkpoint,
            dataset,
        } => commands::entropy(&need_config()?, checkpoint, dataset.as_deref()),
        Command::Select { checkpoint } => commands::select(&need_config()?, checkpoint),
        Command::Dilute {
            checkpoint,
            selection,
        } => commands::dilute(&need_config()?, checkpoint, selection),
        Command::Fuse { checkpoint } => commands::fuse_cmd(&need_config()?, checkpoint),
        Command::Verify { a, b, tol, batch } => {
            commands::verify(&out_dir(), a, b, *tol, *batch, seed())
        }
        Command::Spectrum {
            checkpoint,
            baseline,
            dataset,
        } => commands::spectrum(
            &need_config()?,
            checkpoint,
            baseline.as_deref(),
            dataset.as_deref(),
        ),
        Command::Bench {
            checkpoint,
            batch,
            reps,
            budget,
        } => commands::bench(&out_dir(), checkpoint, *batch, *reps, *budget, seed()),
        Command::Study { action } => match action {
            StudyCmd::Masking {
                checkpoint,
                counts,
                repeats,
            } => study::masking(&need_config()?, checkpoint, counts, *repeats),
            StudyCmd::RemovalSweep { checkpoint } => {
                study::removal_sweep(&need_config()?, checkpoint)
            }
            StudyCmd::Transplant { donor, host } => {
                study::transplant_study(&need_config()?, donor, host)
            }
        },
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
