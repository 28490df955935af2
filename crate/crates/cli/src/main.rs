mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use demp_core::objectives::Ablation;

/// Dual-generative empathetic dialogue: data preparation, training,
/// evaluation and generation.
#[derive(Debug, Parser)]
#[command(name = "demp", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus with per-label marker words.
    Synth(SynthArgs),
    /// Label unpaired candidates and keep the confident, long-enough ones.
    PrepareData(PrepareArgs),
    /// Train a model and write checkpoints plus a JSONL step log.
    Train(TrainArgs),
    /// Score a checkpoint on a paired corpus.
    Evaluate(EvaluateArgs),
    /// Greedy responses for JSONL contexts.
    Generate(GenerateArgs),
    /// Interactive conversation on the terminal.
    Chat(ChatArgs),
    /// Finite-difference gradient sweep.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub n_labels: usize,
    /// Conversations per label before the train/valid/test split.
    #[arg(long, default_value_t = 50)]
    pub per_label: usize,
    #[arg(long, default_value_t = 60)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub separability: f64,
    #[arg(long, default_value_t = 1)]
    pub turn_pairs: usize,
    #[arg(long, default_value_t = 20)]
    pub unpaired_per_label: usize,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Labeled paired corpus the tagger is trained on.
    #[arg(long)]
    pub paired: Option<PathBuf>,
    /// Label list, one per line. Defaults to labels.txt beside --paired.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Candidate contexts (JSONL).
    #[arg(long)]
    pub unpaired_c: Option<PathBuf>,
    /// Candidate responses (JSONL).
    #[arg(long)]
    pub unpaired_y: Option<PathBuf>,
    /// Keep candidates whose confidence is strictly above this.
    #[arg(long, default_value_t = 0.60)]
    pub threshold: f64,
    /// Keep candidates with at least this many tokens.
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    /// Use the emotion and confidence already stored in each candidate
    /// instead of training a tagger.
    #[arg(long)]
    pub prescored: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub paired: PathBuf,
    /// Validation corpus for early stopping. The training pairs are scored
    /// when absent.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub unpaired_c: Option<PathBuf>,
    #[arg(long)]
    pub unpaired_y: Option<PathBuf>,
    /// Defaults to labels.txt beside --paired.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// `key = value` run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config ablation.
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// Resume from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for last.demp, best.demp and train_log.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test corpus.
    #[arg(long)]
    pub paired: PathBuf,
    /// Word vectors for the embedding metrics (`token v1 v2 ...` per line).
    /// The model's own word embeddings are used when absent.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Directory for metrics.json and samples.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL records with an `utterances` list; every utterance is context.
    #[arg(long)]
    pub input: PathBuf,
    /// Output JSONL; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = demp_core::inference::MAX_DECODE_STEPS)]
    pub max_steps: usize,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = demp_core::inference::MAX_DECODE_STEPS)]
    pub max_steps: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model configuration to check; the desk preset when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Check the small K=2, width-8 model at every parameter instead.
    #[arg(long)]
    pub small: bool,
    /// Perturb every N-th parameter in the objective checks.
    #[arg(long, default_value_t = 101)]
    pub stride: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("DEMP_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
