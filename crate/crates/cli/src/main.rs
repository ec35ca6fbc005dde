//! `promptseg`: text-prompted segmentation from the command line.

mod commands;
mod config;
mod dataset;
mod panel;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use promptseg_core::PromptConfig;

use config::{Overrides, RunConfig};

/// Bad configuration or input; exits with 2.
#[derive(Debug)]
pub struct InputError(pub String);

/// Some items of a batch failed; exits with 4.
#[derive(Debug)]
pub struct PartialFailure {
    pub failed: usize,
    pub total: usize,
}

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

impl std::fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} of {} items failed", self.failed, self.total)
    }
}

impl std::error::Error for PartialFailure {}

#[derive(Parser, Debug)]
#[command(name = "promptseg", version, about = "Text-prompted image segmentation")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `synthetic` or `external:<id>`.
    #[arg(long, global = true)]
    encoder: Option<String>,
    /// `mock` or `external:<program>`.
    #[arg(long, global = true)]
    refiner: Option<String>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for batch commands (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fine-tune the encoder projections on image/caption pairs.
    Finetune {
        /// Dataset root with `images/` and `captions.tsv`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Zero-shot segmentation of an image or a directory of images.
    Segment {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        text: TextArgs,
        /// Fine-tuned encoder projections.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the checkpoint ensemble on pseudo-labels.
    WeakTrain {
        /// Dataset root with `images/` and `masks/`.
        #[arg(long)]
        data: PathBuf,
        /// Directory of pseudo-label masks replacing `<data>/masks`.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Ensemble prediction with entropy uncertainty.
    Predict {
        /// Directory written by `weak-train` (its `weak/` folder).
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// DSC and NSD of predicted masks against ground truth.
    EvalSeg {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        nsd_tolerance: Option<u32>,
        /// Suffix replacing `.png` in ground-truth names to find predictions.
        #[arg(long, default_value = ".mask.png")]
        pred_suffix: String,
    },
    /// Image/text retrieval accuracy on a captioned dataset.
    EvalRetrieval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Assemble a side-by-side figure from stored outputs.
    Panel(commands::panel::PanelArgs),
    /// Write a synthetic dataset and matching config for trying the tool.
    MakeToy {
        dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        #[arg(long, default_value_t = 400)]
        pairs: usize,
        #[arg(long, default_value_t = 40)]
        shapes: usize,
    },
}

#[derive(Args, Debug, Clone)]
pub struct TextArgs {
    /// Prompt text; defaults to the first planted concept's prompt.
    #[arg(long, conflicts_with = "prompt_config")]
    prompt: Option<String>,
    /// Prompt configuration (P0 to P5) read from `--manifest`.
    #[arg(long, requires = "manifest")]
    prompt_config: Option<PromptConfig>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Class label inside the manifest.
    #[arg(long = "class")]
    class_label: Option<String>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<PartialFailure>().is_some() {
        return 4;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<promptseg_core::Error>() {
            return if e.is_numeric() { 3 } else { 2 };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let ov = Overrides {
        seed: cli.seed,
        encoder: cli.encoder,
        refiner: cli.refiner,
        out_dir: cli.out_dir,
        workers: cli.workers,
    };
    if let Command::MakeToy { dir, scenes, pairs, shapes } = &cli.command {
        return commands::toy::make_toy(dir, *scenes, *pairs, *shapes, cli.seed.unwrap_or(0));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &ov)?;
    match cli.command {
        Command::Finetune { data } => commands::finetune::run(&cfg, &data),
        Command::Segment { input, text, checkpoint } => commands::segment::run(&cfg, &input, &text, checkpoint.as_deref()),
        Command::WeakTrain { data, labels } => commands::weak::train(&cfg, &data, labels.as_deref()),
        Command::Predict { ensemble, input } => commands::weak::predict(&cfg, &ensemble, &input),
        Command::EvalSeg {
            pred,
            gt,
            nsd_tolerance,
            pred_suffix,
        } => commands::eval::seg(&cfg, &pred, &gt, nsd_tolerance, &pred_suffix),
        Command::EvalRetrieval {
            data,
            checkpoint,
            runs,
            batch_size,
        } => commands::eval::retrieval(&cfg, &data, checkpoint.as_deref(), runs, batch_size),
        Command::Panel(args) => commands::panel::run(&cfg, &args),
        Command::MakeToy { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
