use std::path::{Path, PathBuf};

use laffi_core::corpus::FeedbackRecord;
use laffi_core::io::write_atomic;

use crate::session::{LogEntry, SessionState, Submit};
use crate::{AnnotateError, Result};

pub const SESSION_FILE: &str = "session.json";
pub const LOG_FILE: &str = "submissions.jsonl";

/// A session on disk: the task table, written once, and the submission
/// log, rewritten whole through an atomic rename on every submission.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    state: SessionState,
    log_text: String,
}

/// Applies every line of a submission log to `state`, in order.
pub fn replay(state: &mut SessionState, log_text: &str) -> Result<()> {
    for (i, line) in log_text.lines().enumerate() {
        let entry: LogEntry = serde_json::from_str(line)
            .map_err(|e| AnnotateError::Corrupt(format!("{LOG_FILE} line {}: {e}", i + 1)))?;
        state.apply(entry).map_err(|e| AnnotateError::Corrupt(format!("{LOG_FILE} line {}: {e}", i + 1)))?;
    }
    Ok(())
}

impl Store {
    /// Persists a new session, or reopens the existing one if `dir` already
    /// holds the same session.
    pub fn create(dir: &Path, state: SessionState) -> Result<Self> {
        if dir.join(SESSION_FILE).exists() {
            let existing = Self::open(dir)?;
            if existing.state.session_id != state.session_id {
                return Err(AnnotateError::Data(format!(
                    "{} already holds session {}",
                    dir.display(),
                    existing.state.session_id
                )));
            }
            return Ok(existing);
        }
        let mut text = serde_json::to_string_pretty(&state).map_err(|e| AnnotateError::Data(e.to_string()))?;
        text.push('\n');
        write_atomic(&dir.join(LOG_FILE), b"")?;
        write_atomic(&dir.join(SESSION_FILE), text.as_bytes())?;
        Ok(Self { dir: dir.to_path_buf(), state: SessionState { log: Vec::new(), ..state }, log_text: String::new() })
    }

    /// Loads the task table and replays the submission log.
    pub fn open(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(SESSION_FILE))?;
        let mut state: SessionState =
            serde_json::from_str(&text).map_err(|e| AnnotateError::Corrupt(format!("{SESSION_FILE}: {e}")))?;
        if state.tasks.iter().any(|t| t.status != crate::TaskStatus::Pending) {
            return Err(AnnotateError::Corrupt(format!("{SESSION_FILE} records finished tasks")));
        }
        let log_text = match std::fs::read_to_string(dir.join(LOG_FILE)) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        replay(&mut state, &log_text)?;
        Ok(Self { dir: dir.to_path_buf(), state, log_text })
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Validates, makes the new log durable, then marks the task done.
    pub fn submit(&mut self, task_id: &str, submit: &Submit) -> Result<FeedbackRecord> {
        let entry = self.state.prepare(task_id, submit)?;
        let line = serde_json::to_string(&entry).map_err(|e| AnnotateError::Data(e.to_string()))?;
        let mut text = String::with_capacity(self.log_text.len() + line.len() + 1);
        text.push_str(&self.log_text);
        text.push_str(&line);
        text.push('\n');
        write_atomic(&self.dir.join(LOG_FILE), text.as_bytes())?;
        let record = entry.record.clone();
        self.state.apply(entry)?;
        self.log_text = text;
        Ok(record)
    }
}
