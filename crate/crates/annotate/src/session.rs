use std::collections::{HashMap, HashSet};

use laffi_core::corpus::{self, FeedbackRecord, FeedbackSource, JsonlRecord, PredictedAnswerRecord, QAExample};
use laffi_core::io::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::{AnnotateError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TaskStatus {
    Pending,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub example_id: String,
    pub passage: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub is_answerable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub ordinal: usize,
    pub example: TaskExample,
    pub predicted_answer: String,
    pub ai_feedback_prefill: String,
    pub status: TaskStatus,
    pub assigned_annotator: String,
}

/// One acknowledged submission, as stored in the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub task_id: String,
    pub record: FeedbackRecord,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct Submit {
    pub annotator_id: String,
    pub feedback_text: String,
    pub accepted_ai: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub seed: u64,
    pub roster: Vec<String>,
    pub tasks: Vec<AnnotationTask>,
    /// Replayed from the submission log, never persisted with the tasks.
    #[serde(skip)]
    pub log: Vec<LogEntry>,
}

/// Builds one task per predicted answer (in input order) and splits the
/// tasks among `annotators` with the corpus segmentation rule.
pub fn create_session(
    predicted: &[PredictedAnswerRecord],
    ai_feedback: &[FeedbackRecord],
    examples: &[QAExample],
    annotators: &[String],
    seed: u64,
) -> Result<SessionState> {
    if annotators.is_empty() {
        return Err(AnnotateError::Validation("at least one annotator is required".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = annotators.iter().find(|a| !seen.insert(a.as_str())) {
        return Err(AnnotateError::Validation(format!("annotator {dup:?} listed twice")));
    }
    if let Some(bad) = annotators.iter().find(|a| a.trim().is_empty() || a.contains(['/', '\n'])) {
        return Err(AnnotateError::Validation(format!("invalid annotator id {bad:?}")));
    }
    let by_id = corpus::index_by_id(examples)?;
    let mut prefill: HashMap<&str, &FeedbackRecord> = HashMap::new();
    for f in ai_feedback {
        if f.source != FeedbackSource::Ai {
            return Err(AnnotateError::Data(format!("prefill for {} is not AI feedback", f.example_id)));
        }
        prefill.insert(f.example_id.as_str(), f);
    }
    let mut ids = HashSet::new();
    let mut tasks = Vec::with_capacity(predicted.len());
    for (ordinal, p) in predicted.iter().enumerate() {
        if !ids.insert(p.example_id.as_str()) {
            return Err(AnnotateError::Data(format!("example {} predicted twice", p.example_id)));
        }
        let ex = by_id
            .get(p.example_id.as_str())
            .ok_or_else(|| AnnotateError::Data(format!("example {} is not in the corpus", p.example_id)))?;
        let ai = prefill
            .get(p.example_id.as_str())
            .filter(|f| !f.feedback_text.is_empty())
            .ok_or_else(|| AnnotateError::Data(format!("example {} has no AI feedback to prefill", p.example_id)))?;
        tasks.push(AnnotationTask {
            task_id: format!("t{ordinal:05}"),
            ordinal,
            example: TaskExample {
                example_id: ex.id.clone(),
                passage: ex.passage.clone(),
                question: ex.question.clone(),
                gold_answers: ex.gold_answers.clone(),
                is_answerable: ex.is_answerable,
            },
            predicted_answer: p.predicted_answer.clone(),
            ai_feedback_prefill: ai.feedback_text.clone(),
            status: TaskStatus::Pending,
            assigned_annotator: String::new(),
        });
    }
    let ordinals: Vec<usize> = (0..tasks.len()).collect();
    let segments = corpus::segment(&ordinals, annotators.len(), seed)?;
    for (annotator, seg) in annotators.iter().zip(segments) {
        for i in seg {
            tasks[i].assigned_annotator = annotator.clone();
        }
    }
    let fingerprint = serde_json::to_string(&(&tasks, annotators, seed)).expect("tasks serialize");
    Ok(SessionState {
        session_id: sha256_hex(fingerprint.as_bytes())[..16].to_string(),
        seed,
        roster: annotators.to_vec(),
        tasks,
        log: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnnotatorProgress {
    pub annotator_id: String,
    pub assigned: usize,
    pub done: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Progress {
    pub total: usize,
    pub done: usize,
    pub annotators: Vec<AnnotatorProgress>,
}

impl SessionState {
    fn check_annotator(&self, id: &str) -> Result<()> {
        if self.roster.iter().any(|a| a == id) {
            Ok(())
        } else {
            Err(AnnotateError::UnknownAnnotator(id.to_string()))
        }
    }

    fn task_index(&self, task_id: &str) -> Result<usize> {
        task_id
            .strip_prefix('t')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&i| self.tasks.get(i).is_some_and(|t| t.task_id == task_id))
            .ok_or_else(|| AnnotateError::NotFound(task_id.to_string()))
    }

    /// Lowest-ordinal pending task of the annotator's segment.
    pub fn next_task(&self, annotator_id: &str) -> Result<Option<&AnnotationTask>> {
        self.check_annotator(annotator_id)?;
        Ok(self.tasks.iter().find(|t| t.assigned_annotator == annotator_id && t.status == TaskStatus::Pending))
    }

    /// Checks a submission without applying it and returns the record it
    /// would store.
    pub fn prepare(&self, task_id: &str, submit: &Submit) -> Result<LogEntry> {
        self.check_annotator(&submit.annotator_id)?;
        let task = &self.tasks[self.task_index(task_id)?];
        if task.assigned_annotator != submit.annotator_id {
            return Err(AnnotateError::NotOwner { task: task_id.to_string() });
        }
        if task.status == TaskStatus::Done {
            return Err(AnnotateError::Conflict(task_id.to_string()));
        }
        if submit.feedback_text.trim().is_empty() {
            return Err(AnnotateError::Validation("feedback_text must not be empty".into()));
        }
        if submit.accepted_ai && submit.feedback_text != task.ai_feedback_prefill {
            return Err(AnnotateError::Validation(
                "accepted_ai is true but feedback_text differs from the AI prefill".into(),
            ));
        }
        let record = FeedbackRecord {
            example_id: task.example.example_id.clone(),
            predicted_answer: task.predicted_answer.clone(),
            feedback_text: submit.feedback_text.clone(),
            source: FeedbackSource::Human,
            annotator_id: Some(submit.annotator_id.clone()),
            accepted_ai: Some(submit.accepted_ai),
            fallback: false,
        };
        record.validate().map_err(|e| AnnotateError::Validation(e.to_string()))?;
        Ok(LogEntry { task_id: task_id.to_string(), record })
    }

    /// Applies an entry produced by [`prepare`](Self::prepare) or read back
    /// from the log; entries are re-checked so a tampered log is rejected.
    pub fn apply(&mut self, entry: LogEntry) -> Result<()> {
        let annotator = entry
            .record
            .annotator_id
            .clone()
            .ok_or_else(|| AnnotateError::Validation("log entry without annotator".into()))?;
        let submit = Submit {
            annotator_id: annotator,
            feedback_text: entry.record.feedback_text.clone(),
            accepted_ai: entry.record.accepted_ai.unwrap_or(false),
        };
        let checked = self.prepare(&entry.task_id, &submit)?;
        if checked != entry {
            return Err(AnnotateError::Validation(format!("log entry for {} does not match its task", entry.task_id)));
        }
        let i = self.task_index(&entry.task_id)?;
        self.tasks[i].status = TaskStatus::Done;
        self.log.push(entry);
        Ok(())
    }

    pub fn progress(&self) -> Progress {
        let annotators = self
            .roster
            .iter()
            .map(|a| {
                let mine = self.tasks.iter().filter(|t| &t.assigned_annotator == a);
                let (assigned, done) =
                    mine.fold((0, 0), |(n, d), t| (n + 1, d + usize::from(t.status == TaskStatus::Done)));
                AnnotatorProgress { annotator_id: a.clone(), assigned, done }
            })
            .collect();
        Progress { total: self.tasks.len(), done: self.log.len(), annotators }
    }

    /// HUMAN records of every finished task, in task order.
    pub fn export(&self) -> Vec<FeedbackRecord> {
        let mut done: Vec<&LogEntry> = self.log.iter().collect();
        done.sort_by_key(|e| self.task_index(&e.task_id).unwrap_or(usize::MAX));
        done.into_iter().map(|e| e.record.clone()).collect()
    }
}
