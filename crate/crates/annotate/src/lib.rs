//! Annotation service: splits predicted answers among annotators, prefills
//! each task with the model's own feedback, and records what the annotators
//! submit in an append-only log that is replayed on restart.

pub mod http;
pub mod session;
pub mod store;

pub use http::{router, serve, serve_on, AppState};
pub use session::{
    create_session, AnnotationTask, AnnotatorProgress, LogEntry, Progress, SessionState, Submit, TaskExample,
    TaskStatus,
};
pub use store::Store;

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("unknown annotator {0:?}")]
    UnknownAnnotator(String),
    #[error("task {task} belongs to another annotator")]
    NotOwner { task: String },
    #[error("task {0} is already done")]
    Conflict(String),
    #[error("{0}")]
    Validation(String),
    #[error("no task {0}")]
    NotFound(String),
    #[error("{0}")]
    Data(String),
    #[error("corrupt session store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Corpus(#[from] laffi_core::corpus::CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnnotateError>;
