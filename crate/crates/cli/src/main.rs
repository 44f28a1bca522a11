//! Command-line harness for the prompt-tuning experiments: corpus tooling,
//! training, evaluation protocols, ablation suites, and checkpoint
//! inspection, all driven by one TOML config with flag overrides.
//!
//! Exit codes are a stable contract: 0 success, 2 usage or configuration
//! problems, 3 numerical failure (divergence). `PKI_SEED` overrides the
//! config-file seed; explicit `--seed` flags win over both.

mod manifest;
mod ops;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pki_core::error::Error as CoreError;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> CliError {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> CliError {
        CliError {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> CliError {
        match e {
            CoreError::Divergence(_) | CoreError::Domain(_) | CoreError::DegenerateAttention(_) => {
                CliError::numerical(e.to_string())
            }
            other => CliError::usage(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "pki",
    version,
    about = "Prior-knowledge-infused prompt tuning on a desk-scale dual encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize or validate knowledge corpora.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Train prompts on the configured task and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one of the protocols.
    Eval(EvalArgs),
    /// Run a preset ablation suite and write the consolidated table.
    Ablate(AblateArgs),
    /// Print a checkpoint's header and tensor manifest.
    Inspect {
        /// Checkpoint file to describe.
        checkpoint: PathBuf,
    },
}

#[derive(Subcommand)]
enum CorpusAction {
    /// Generate a synthetic corpus and write it as TSV.
    Synth(CorpusSynthArgs),
    /// Load a corpus file and check its structural invariants.
    Validate {
        /// Corpus TSV file.
        file: PathBuf,
    },
}

#[derive(Args)]
struct CorpusSynthArgs {
    /// Output TSV path.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing file.
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 2)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    /// Attributes per class.
    #[arg(long, default_value_t = 8)]
    attrs: usize,
    /// Shared attribute pool size.
    #[arg(long, default_value_t = 40)]
    pool: usize,
    /// Fraction of each class's attributes drawn from the shared pool.
    #[arg(long, default_value_t = 0.5)]
    sharing: f64,
}

/// Config-field overrides shared by the run commands. Every field is
/// optional; set ones replace the config-file (or default) values.
#[derive(Args, Clone)]
struct Overrides {
    /// Run seed (prompt init and batch order).
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus seed (class/attribute draw, split, images).
    #[arg(long)]
    corpus_seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    eval_per_class: Option<usize>,
    #[arg(long)]
    image_noise: Option<f64>,
    /// Fusion depth J.
    #[arg(long)]
    inject_depth: Option<usize>,
    /// Prompt token count M.
    #[arg(long)]
    prompt_len: Option<usize>,
    /// Weight of the feature-consistency loss term.
    #[arg(long)]
    lambda_text: Option<f64>,
    /// Include attribute knowledge in the text input.
    #[arg(long)]
    knowledge: Option<bool>,
    /// Project prompt tokens into the vision tower.
    #[arg(long)]
    vision_prompts: Option<bool>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment config; omitted means built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint, log, and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing run in the output directory.
    #[arg(long)]
    force: bool,
    /// Which classes to train on: the base split or all classes.
    #[arg(long, value_parser = ["base", "all"], default_value = "base")]
    train_split: String,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// TOML experiment config; must match the checkpoint's model config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["base-to-novel", "few-shot", "cross-dataset"],
          default_value = "base-to-novel")]
    protocol: String,
    /// Evaluation-draw seeds, one result row each.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    seeds: Vec<u64>,
    /// Target corpus TSV for the cross-dataset protocol.
    #[arg(long)]
    target_corpus: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct AblateArgs {
    /// TOML experiment config for the shared base configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset name; unknown names list the available presets.
    #[arg(long)]
    preset: String,
    /// Run seeds shared by every variant.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Corpus { action } => match action {
            CorpusAction::Synth(args) => ops::corpus_synth(&args),
            CorpusAction::Validate { file } => ops::corpus_validate(&file),
        },
        Command::Train(args) => ops::train(&args),
        Command::Eval(args) => ops::eval(&args),
        Command::Ablate(args) => ops::ablate(&args),
        Command::Inspect { checkpoint } => ops::inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
