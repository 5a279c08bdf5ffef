use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

/// Exit status 1: bad usage or input. Exit status 2: the work itself
/// failed.
#[derive(Debug)]
pub enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn invalid(msg: impl std::fmt::Display) -> Self {
        Failure::Invalid(anyhow::anyhow!("{msg}"))
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

pub trait OrFail<T> {
    fn invalid(self, what: &str) -> Result<T, Failure>;
    fn runtime(self, what: &str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrFail<T> for Result<T, E> {
    fn invalid(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.into().context(what.to_string())))
    }

    fn runtime(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into().context(what.to_string())))
    }
}

#[derive(Parser, Debug)]
#[command(name = "laffi", version, about = "Feedback-prediction fine-tuning of a toy transformer, end to end")]
pub struct Cli {
    /// TOML file; a `[<subcommand>]` table overrides top-level keys, flags
    /// override both.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base directory for relative paths.
    #[arg(long, global = true, env = "LAFFI_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Root of every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic QA corpus as JSONL.
    Synth(SynthArgs),
    /// Convert a SQuAD-2.0-style JSON file to QA JSONL.
    Ingest(IngestArgs),
    /// Write the bundled prompt templates to a directory.
    Templates(TemplatesArgs),
    /// Pre-train a toy base model and save its checkpoint.
    Init(InitArgs),
    /// Stage 1: generate an answer for every example.
    Predict(PredictArgs),
    /// Stage 2: generate AI feedback on predicted answers.
    AnnotateAi(AnnotateAiArgs),
    /// Write HUMAN feedback from the gold answers (unattended runs).
    AnnotateReference(AnnotateReferenceArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
    /// Export the human feedback collected in a session directory.
    Export(ExportArgs),
    /// Combine human and AI feedback at a given proportion.
    Mix(MixArgs),
    /// Train LoRA adapters on feedback (laffi) or gold answers (sft).
    Train(TrainArgs),
    /// Score predictions against a dataset.
    Eval(EvalArgs),
    /// Export head-averaged attention maps for a prompt.
    Attention(AttentionArgs),
    /// Run the arms × presets × fractions × sizes grid.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub squad: Option<PathBuf>,
    /// Keep a uniform random subset of this many examples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TemplatesArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub preset: Option<String>,
    /// QA JSONL to pre-train on; a synthetic corpus when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub corpus_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Predicted-answer JSONL; `eval` reads it directly. Records already in
    /// the file with a matching model and prompt are kept, not regenerated.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnnotateAiArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    #[arg(long)]
    pub predicted: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnnotateReferenceArgs {
    #[arg(long)]
    pub predicted: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub predicted: Option<PathBuf>,
    #[arg(long)]
    pub ai_feedback: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma-separated annotator ids.
    #[arg(long)]
    pub annotators: Option<String>,
    #[arg(long)]
    pub session_dir: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Built annotation UI to serve at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub session_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MixArgs {
    #[arg(long)]
    pub human: Option<PathBuf>,
    #[arg(long)]
    pub ai: Option<PathBuf>,
    #[arg(long)]
    pub total: Option<usize>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Feedback JSONL (laffi mode).
    #[arg(long)]
    pub feedback: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-example scores as CSV.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttentionArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// `NAME=ADAPTERS.ckpt`, repeatable; `NAME=-` runs the bare base model.
    /// Defaults to one run named `base`.
    #[arg(long = "run")]
    pub runs: Vec<String>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Layer to average (default: last).
    #[arg(long)]
    pub layer: Option<usize>,
    /// csv or pgm.
    #[arg(long)]
    pub format: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// TOML grid spec; the `[experiment]` table of --config is used when
    /// absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// QA JSONL training pool instead of a synthetic one.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// QA JSONL evaluation set instead of a synthetic one.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Invalid(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
