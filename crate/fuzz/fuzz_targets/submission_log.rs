#![no_main]

use laffi_annotate::store::replay;
use laffi_annotate::{create_session, SessionState, TaskStatus};
use laffi_core::corpus::{make_synthetic_corpus, FeedbackRecord, FeedbackSource, PredictedAnswerRecord};
use libfuzzer_sys::fuzz_target;

fn session() -> SessionState {
    let examples = make_synthetic_corpus(8, 1);
    let predicted: Vec<PredictedAnswerRecord> = examples
        .iter()
        .map(|e| PredictedAnswerRecord {
            example_id: e.id.clone(),
            model_id: "m".into(),
            prompt_fingerprint: String::new(),
            predicted_answer: "x".into(),
        })
        .collect();
    let ai: Vec<FeedbackRecord> = examples
        .iter()
        .map(|e| FeedbackRecord {
            example_id: e.id.clone(),
            predicted_answer: "x".into(),
            feedback_text: "ok".into(),
            source: FeedbackSource::Ai,
            annotator_id: None,
            accepted_ai: None,
            fallback: false,
        })
        .collect();
    create_session(&predicted, &ai, &examples, &["a".into(), "b".into()], 0).expect("fixture session")
}

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let mut s = session();
    let _ = replay(&mut s, text);
    // Whatever was accepted must satisfy the ownership and status rules.
    for e in &s.log {
        let t = s.tasks.iter().find(|t| t.task_id == e.task_id).expect("logged task exists");
        assert_eq!(t.status, TaskStatus::Done);
        assert_eq!(e.record.annotator_id.as_deref(), Some(t.assigned_annotator.as_str()));
    }
    assert_eq!(s.log.len(), s.tasks.iter().filter(|t| t.status == TaskStatus::Done).count());
});
