//! The training stages: answer prediction, AI feedback annotation, pair
//! construction for feedback prediction (LaFFi) or answer supervision
//! (SFT), adapter training, toy pre-training, and the experiment grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::eval::EvalError;
use crate::lora::LoraConfig;
use crate::model::ModelError;
use crate::tensor::{AdamWConfig, TensorError};

mod experiment;
mod pairs;
mod pretrain;
mod stages;
mod train;

pub use experiment::{
    report_csv, run_experiment, write_report_csv, Arm, CellRecord, ExperimentInputs, ExperimentReport, ExperimentRow,
    ExperimentSpec, Metrics, PresetRecord, CSV_COLUMNS,
};
pub use pairs::{build_laffi_pair, build_laffi_pairs, build_sft_pair, build_sft_pairs, gold_text, TrainingPair};
pub use pretrain::{pretrain_documents, pretrain_toy, PretrainConfig, PretrainOutcome};
pub use stages::{
    answer_prompt, reference_feedback, simulate_human_feedback, stage1_predict, stage2_ai_annotate, Stage1Output,
    ANSWER_SHOTS, REFERENCE_ANNOTATOR,
};
pub use train::{train, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// A record a stage could not process; the run continues without it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub example_id: String,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Laffi,
    Sft,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Laffi => "laffi",
            TrainMode::Sft => "sft",
        })
    }
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "laffi" => Ok(Self::Laffi),
            "sft" => Ok(Self::Sft),
            _ => Err(format!("unknown mode {s:?} (expected laffi or sft)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub lora: LoraConfig,
    /// Pairs longer than this after left-truncating the context are skipped.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            mode: TrainMode::Laffi,
            epochs: 3,
            batch_size: 4,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            lora: LoraConfig::default(),
            max_seq_len: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(PipelineError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be at least 1".into()));
        }
        if self.max_seq_len < 3 {
            return Err(PipelineError::Config("max_seq_len must be at least 3".into()));
        }
        self.adamw().validate()?;
        Ok(())
    }
}
