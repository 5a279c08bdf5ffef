//! Dataset records, their JSONL persistence, and the dataset mechanics
//! (ingestion, subsetting, mixing, segmentation, prompt templates).

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

mod sample;
mod squad;
mod synthetic;
pub mod template;

pub use sample::{human_count, mix, sample_subset, segment, shuffled, MixSpec};
pub use squad::{load_squad, parse_squad};
pub use synthetic::make_synthetic_corpus;
pub use template::{Bindings, PromptTemplate};

pub const SCHEMA_VERSION: u32 = 1;

/// What an unanswerable question's correct output looks like.
pub const UNANSWERABLE_PHRASE: &str = "the answer cannot be found";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub passage: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub is_answerable: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedAnswerRecord {
    pub example_id: String,
    pub model_id: String,
    /// SHA-256 (hex) of the rendered prompt.
    pub prompt_fingerprint: String,
    pub predicted_answer: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeedbackSource {
    #[serde(rename = "AI")]
    Ai,
    #[serde(rename = "HUMAN")]
    Human,
}

impl fmt::Display for FeedbackSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeedbackSource::Ai => "AI",
            FeedbackSource::Human => "HUMAN",
        })
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub example_id: String,
    pub predicted_answer: String,
    pub feedback_text: String,
    pub source: FeedbackSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted_ai: Option<bool>,
    /// Set when the generated feedback was empty and a templated
    /// replacement was stored instead.
    #[serde(default, skip_serializing_if = "is_false")]
    pub fallback: bool,
}

/// A record type that can be stored one-per-line with a schema version.
pub trait JsonlRecord: Serialize + DeserializeOwned {
    fn validate(&self) -> Result<()>;
}

impl JsonlRecord for QAExample {
    fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(CorpusError::Validation("example with empty id".into()));
        }
        if self.is_answerable == self.gold_answers.is_empty() {
            return Err(CorpusError::Validation(format!(
                "example {}: is_answerable={} but {} gold answers",
                self.id,
                self.is_answerable,
                self.gold_answers.len()
            )));
        }
        Ok(())
    }
}

impl JsonlRecord for PredictedAnswerRecord {
    fn validate(&self) -> Result<()> {
        if self.example_id.is_empty() {
            return Err(CorpusError::Validation("predicted answer with empty example_id".into()));
        }
        Ok(())
    }
}

impl JsonlRecord for FeedbackRecord {
    fn validate(&self) -> Result<()> {
        let id = &self.example_id;
        if self.feedback_text.trim().is_empty() {
            return Err(CorpusError::Validation(format!("feedback for {id} is empty")));
        }
        match self.source {
            FeedbackSource::Human if self.annotator_id.as_deref().map_or(true, str::is_empty) => {
                Err(CorpusError::Validation(format!("HUMAN feedback for {id} has no annotator_id")))
            }
            FeedbackSource::Ai if self.accepted_ai.is_some() => {
                Err(CorpusError::Validation(format!("AI feedback for {id} carries accepted_ai")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Serialize)]
struct VersionedRef<'a, T> {
    schema_version: u32,
    #[serde(flatten)]
    record: &'a T,
}

#[derive(Deserialize)]
struct Versioned<T> {
    schema_version: u32,
    #[serde(flatten)]
    record: T,
}

pub fn to_jsonl<T: JsonlRecord>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(&VersionedRef { schema_version: SCHEMA_VERSION, record: r })
            .map_err(|e| CorpusError::Data(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Parses JSONL, skipping blank lines. Errors name the 1-based line.
pub fn parse_jsonl<T: JsonlRecord>(text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let path = format!("line {}", i + 1);
        let v: Versioned<T> = serde_json::from_str(line)
            .map_err(|e| CorpusError::Parse { path: path.clone(), message: e.to_string() })?;
        if v.schema_version != SCHEMA_VERSION {
            return Err(CorpusError::Parse {
                path,
                message: format!("unsupported schema_version {}", v.schema_version),
            });
        }
        v.record.validate().map_err(|e| CorpusError::Parse { path, message: e.to_string() })?;
        out.push(v.record);
    }
    Ok(out)
}

pub fn write_jsonl<T: JsonlRecord>(path: &Path, records: &[T]) -> Result<()> {
    crate::io::write_atomic(path, to_jsonl(records)?.as_bytes())?;
    Ok(())
}

pub fn read_jsonl<T: JsonlRecord>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    parse_jsonl(&text).map_err(|e| match e {
        CorpusError::Parse { path: p, message } => {
            CorpusError::Parse { path: format!("{}:{p}", path.display()), message }
        }
        other => other,
    })
}

/// Looks examples up by id.
pub fn index_by_id(examples: &[QAExample]) -> Result<std::collections::HashMap<&str, &QAExample>> {
    let mut map = std::collections::HashMap::with_capacity(examples.len());
    for ex in examples {
        if map.insert(ex.id.as_str(), ex).is_some() {
            return Err(CorpusError::Validation(format!("duplicate example id {}", ex.id)));
        }
    }
    Ok(map)
}
