use std::collections::HashSet;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use laffi_annotate::{create_session, router, AnnotateError, AppState, SessionState, Store, Submit, TaskStatus};
use laffi_core::corpus::{
    self, make_synthetic_corpus, mix, FeedbackRecord, FeedbackSource, MixSpec, PredictedAnswerRecord, QAExample,
};
use proptest::prelude::*;
use serde_json::{json, Value};

const SEED: u64 = 31;

struct Fixture {
    examples: Vec<QAExample>,
    predicted: Vec<PredictedAnswerRecord>,
    ai: Vec<FeedbackRecord>,
}

fn fixture(n: usize) -> Fixture {
    let examples = make_synthetic_corpus(n, 5);
    let predicted: Vec<PredictedAnswerRecord> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| PredictedAnswerRecord {
            example_id: e.id.clone(),
            model_id: "fixture".into(),
            prompt_fingerprint: format!("{i:064x}"),
            predicted_answer: if i % 3 == 0 {
                "Lisbon".into()
            } else {
                e.gold_answers.first().cloned().unwrap_or_else(|| corpus::UNANSWERABLE_PHRASE.into())
            },
        })
        .collect();
    let ai = predicted
        .iter()
        .map(|p| FeedbackRecord {
            example_id: p.example_id.clone(),
            predicted_answer: p.predicted_answer.clone(),
            feedback_text: format!("AI says {} looks plausible.", p.predicted_answer),
            source: FeedbackSource::Ai,
            annotator_id: None,
            accepted_ai: None,
            fallback: false,
        })
        .collect();
    Fixture { examples, predicted, ai }
}

fn annotators(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("ann{i}")).collect()
}

fn session(f: &Fixture, k: usize) -> SessionState {
    create_session(&f.predicted, &f.ai, &f.examples, &annotators(k), SEED).unwrap()
}

async fn call(
    app: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
    bearer: Option<&str>,
) -> (StatusCode, Vec<u8>) {
    use tower::ServiceExt;
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = bearer {
        req = req.header("authorization", format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn submit_body(annotator: &str, text: &str, accepted: bool) -> Value {
    json!({"annotator_id": annotator, "feedback_text": text, "accepted_ai": accepted})
}

#[test]
fn segments_932_into_six() {
    let f = fixture(932);
    let s = session(&f, 6);
    let sizes: Vec<usize> = s.progress().annotators.iter().map(|a| a.assigned).collect();
    assert_eq!(sizes, [156, 156, 155, 155, 155, 155]);
    assert!(s.tasks.iter().all(|t| !t.ai_feedback_prefill.is_empty() && t.status == TaskStatus::Pending));

    // Same partition as the corpus segmentation rule.
    let ordinals: Vec<usize> = (0..932).collect();
    let segs = corpus::segment(&ordinals, 6, SEED).unwrap();
    for (a, seg) in annotators(6).iter().zip(segs) {
        for i in seg {
            assert_eq!(&s.tasks[i].assigned_annotator, a);
        }
    }
    assert_eq!(s, session(&f, 6));
}

#[test]
fn create_session_rejects_bad_input() {
    let f = fixture(20);
    let mut ai = f.ai.clone();
    let missing = ai.remove(7).example_id;
    match create_session(&f.predicted, &ai, &f.examples, &annotators(2), SEED) {
        Err(AnnotateError::Data(m)) => assert!(m.contains(&missing), "{m}"),
        other => panic!("expected data error, got {other:?}"),
    }
    assert!(create_session(&f.predicted, &f.ai, &f.examples, &[], SEED).is_err());
    let dup = vec!["a".to_string(), "a".to_string()];
    assert!(create_session(&f.predicted, &f.ai, &f.examples, &dup, SEED).is_err());
    let mut human = f.ai.clone();
    human[0].source = FeedbackSource::Human;
    assert!(create_session(&f.predicted, &human, &f.examples, &annotators(2), SEED).is_err());
}

#[tokio::test(flavor = "multi_thread")]
async fn full_round_trip_on_932_records() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture(932);
    let store = Store::create(dir.path(), session(&f, 6)).unwrap();
    let app = router(AppState::new(store), None);

    let (st, body) = call(&app, "GET", "/api/session", None, None).await;
    assert_eq!(st, StatusCode::OK);
    let v = json_of(&body);
    assert_eq!(v["roster"].as_array().unwrap().len(), 6);
    assert_eq!(v["progress"]["total"], 932);
    assert_eq!(v["progress"]["done"], 0);

    let (st, body) = call(&app, "GET", "/api/export", None, None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(body.is_empty());

    let mut submitted = 0usize;
    let mut last_export = String::new();
    for (ai, who) in annotators(6).iter().enumerate() {
        let mut last_ordinal = None;
        loop {
            let (st, body) = call(&app, "GET", &format!("/api/annotators/{who}/next"), None, Some(who)).await;
            if st == StatusCode::NO_CONTENT {
                break;
            }
            assert_eq!(st, StatusCode::OK);
            let task = json_of(&body);
            assert_eq!(task["assigned_annotator"], who.as_str());
            assert_eq!(task["status"], "PENDING");
            let ordinal = task["ordinal"].as_u64().unwrap();
            assert!(last_ordinal.is_none_or(|o| o < ordinal), "next is lowest pending ordinal first");
            last_ordinal = Some(ordinal);
            let id = task["task_id"].as_str().unwrap().to_string();
            let prefill = task["ai_feedback_prefill"].as_str().unwrap().to_string();
            let accept = (ordinal + ai as u64) % 2 == 0;
            let text = if accept { prefill.clone() } else { format!("{prefill} Edited by {who}.") };
            let (st, body) =
                call(&app, "POST", &format!("/api/tasks/{id}/feedback"), Some(submit_body(who, &text, accept)), None)
                    .await;
            assert_eq!(st, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
            let rec = json_of(&body);
            assert_eq!(rec["source"], "HUMAN");
            assert_eq!(rec["annotator_id"], who.as_str());
            assert_eq!(rec["accepted_ai"], accept);
            assert_eq!(rec["feedback_text"], text.as_str());
            submitted += 1;
        }
        // Later exports contain every earlier line; ordering is by task,
        // so new lines interleave rather than append.
        let (_, body) = call(&app, "GET", "/api/export", None, None).await;
        let now = String::from_utf8(body).unwrap();
        let before: HashSet<&str> = last_export.lines().collect();
        let after: HashSet<&str> = now.lines().collect();
        assert!(before.is_subset(&after));
        last_export = now;
    }
    assert_eq!(submitted, 932);

    let (_, body) = call(&app, "GET", "/api/progress", None, None).await;
    let p = json_of(&body);
    assert_eq!(p["done"], 932);
    for a in p["annotators"].as_array().unwrap() {
        assert_eq!(a["done"], a["assigned"]);
    }

    let records: Vec<FeedbackRecord> = corpus::parse_jsonl(&last_export).unwrap();
    assert_eq!(records.len(), 932);
    let order: Vec<&str> = records.iter().map(|r| r.example_id.as_str()).collect();
    let want: Vec<&str> = f.predicted.iter().map(|p| p.example_id.as_str()).collect();
    assert_eq!(order, want, "export follows task order");
    assert!(records.iter().all(|r| r.source == FeedbackSource::Human));

    // The export is usable as the human side of a mix.
    let mixed = mix(&records, &f.ai, &MixSpec { total_n: 200, human_fraction: 0.5, seed: 3 }).unwrap();
    assert_eq!(mixed.iter().filter(|r| r.source == FeedbackSource::Human).count(), 100);

    let (st, _) = call(&app, "GET", "/", None, None).await;
    assert_eq!(st, StatusCode::OK);
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture(24);
    let state = session(&f, 2);
    let mine = state.tasks.iter().find(|t| t.assigned_annotator == "ann1").unwrap().clone();
    let app = router(AppState::new(Store::create(dir.path(), state).unwrap()), None);
    let uri = format!("/api/tasks/{}/feedback", mine.task_id);

    let code = |b: &[u8]| json_of(b)["code"].as_str().unwrap().to_string();

    let (st, b) = call(&app, "GET", "/api/annotators/mallory/next", None, None).await;
    assert_eq!((st, code(&b).as_str()), (StatusCode::UNAUTHORIZED, "unknown_annotator"));
    assert!(json_of(&b)["message"].as_str().unwrap().contains("mallory"));

    let (st, _) = call(&app, "GET", "/api/annotators/ann1/next", None, Some("ann2")).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);

    let (st, b) = call(&app, "POST", &uri, Some(submit_body("ann2", "x", false)), None).await;
    assert_eq!((st, code(&b).as_str()), (StatusCode::FORBIDDEN, "not_owner"));

    let (st, b) = call(&app, "POST", &uri, Some(submit_body("ann1", "  ", false)), None).await;
    assert_eq!((st, code(&b).as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "validation"));

    let (st, _) = call(&app, "POST", &uri, Some(submit_body("ann1", "edited", true)), None).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);

    let (st, b) = call(&app, "POST", &uri, Some(json!({"annotator_id": "ann1"})), None).await;
    assert_eq!((st, code(&b).as_str()), (StatusCode::BAD_REQUEST, "bad_request"));

    let (st, _) = call(&app, "POST", "/api/tasks/t99999/feedback", Some(submit_body("ann1", "x", false)), None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let (st, _) = call(&app, "POST", &uri, Some(submit_body("ann1", "fine", false)), Some("ann2")).await;
    assert_eq!(st, StatusCode::UNAUTHORIZED);

    // Two reads without a submission return the same task.
    let (_, a) = call(&app, "GET", "/api/annotators/ann1/next", None, None).await;
    let (_, b) = call(&app, "GET", "/api/annotators/ann1/next", None, None).await;
    assert_eq!(a, b);
    assert_eq!(json_of(&a)["task_id"], mine.task_id.as_str());

    let (st, b) =
        call(&app, "POST", &uri, Some(submit_body("ann1", &mine.ai_feedback_prefill, true)), Some("ann1")).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(json_of(&b)["feedback_text"], mine.ai_feedback_prefill.as_str());

    let (st, b) = call(&app, "POST", &uri, Some(submit_body("ann1", "again", false)), None).await;
    assert_eq!((st, code(&b).as_str()), (StatusCode::CONFLICT, "already_done"));

    let (_, b) = call(&app, "GET", "/api/progress", None, None).await;
    assert_eq!(json_of(&b)["done"], 1);
}

fn submit_n(store: &mut Store, n: usize) -> Vec<FeedbackRecord> {
    let mut acked = Vec::new();
    let roster = store.state().roster.clone();
    'outer: for round in 0.. {
        let mut progressed = false;
        for who in &roster {
            if acked.len() == n {
                break 'outer;
            }
            let Some(task) = store.state().next_task(who).unwrap().cloned() else {
                continue;
            };
            let text = format!("round {round} feedback from {who}");
            acked.push(
                store
                    .submit(
                        &task.task_id,
                        &Submit { annotator_id: who.clone(), feedback_text: text, accepted_ai: false },
                    )
                    .unwrap(),
            );
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    acked
}

#[test]
fn restart_replays_exactly_the_acknowledged_submissions() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture(932);
    let mut store = Store::create(dir.path(), session(&f, 6)).unwrap();
    let acked = submit_n(&mut store, 40);
    let before = store.state().clone();
    drop(store);

    // A kill during the next write leaves a half-written temp file behind;
    // it must not be picked up.
    std::fs::write(dir.path().join("submissions.jsonl.tmp"), b"{\"task_id\":\"t0").unwrap();

    let mut reopened = Store::open(dir.path()).unwrap();
    assert_eq!(reopened.state(), &before);
    assert_eq!(reopened.state().log.len(), 40);
    let mut exported = reopened.state().export();
    let mut want = acked.clone();
    let key = |r: &FeedbackRecord| r.example_id.clone();
    exported.sort_by_key(key);
    want.sort_by_key(key);
    assert_eq!(exported, want);

    // Work continues where it left off, and create() on the same inputs
    // reopens rather than resets.
    let more = submit_n(&mut reopened, 5);
    assert_eq!(more.len(), 5);
    drop(reopened);
    let again = Store::create(dir.path(), session(&f, 6)).unwrap();
    assert_eq!(again.state().log.len(), 45);

    let other = create_session(&f.predicted, &f.ai, &f.examples, &annotators(5), SEED).unwrap();
    assert!(matches!(Store::create(dir.path(), other), Err(AnnotateError::Data(_))));
}

#[test]
fn tampered_log_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixture(12);
    let mut store = Store::create(dir.path(), session(&f, 2)).unwrap();
    submit_n(&mut store, 2);
    drop(store);
    let log = dir.path().join("submissions.jsonl");
    let text = std::fs::read_to_string(&log).unwrap();

    // Duplicate entry.
    let first = text.lines().next().unwrap();
    std::fs::write(&log, format!("{text}{first}\n")).unwrap();
    match Store::open(dir.path()) {
        Err(AnnotateError::Corrupt(m)) => assert!(m.contains("line 3"), "{m}"),
        other => panic!("expected corrupt, got {other:?}"),
    }

    // Wrong owner.
    let v: Value = serde_json::from_str(first).unwrap();
    let owner = v["record"]["annotator_id"].as_str().unwrap();
    let other = if owner == "ann1" { "ann2" } else { "ann1" };
    std::fs::write(&log, first.replace(owner, other) + "\n").unwrap();
    assert!(matches!(Store::open(dir.path()), Err(AnnotateError::Corrupt(_))));

    std::fs::write(&log, "not json\n").unwrap();
    assert!(matches!(Store::open(dir.path()), Err(AnnotateError::Corrupt(_))));
}

#[derive(Clone, Debug)]
struct Op {
    annotator: usize,
    task: usize,
    accept: bool,
    empty: bool,
}

fn op() -> impl Strategy<Value = Op> {
    (0usize..4, 0usize..15, any::<bool>(), prop::bool::weighted(0.1)).prop_map(|(annotator, task, accept, empty)| Op {
        annotator,
        task,
        accept,
        empty,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn only_owners_finish_tasks(ops in prop::collection::vec(op(), 1..40)) {
        let f = fixture(15);
        let mut s = session(&f, 3);
        // Index 3 is not on the roster.
        let names = ["ann1", "ann2", "ann3", "ann9"];
        let mut done = 0;
        for o in ops {
            let task = s.tasks[o.task].clone();
            let text = if o.empty { String::new() } else if o.accept { task.ai_feedback_prefill.clone() } else { "edited".into() };
            let submit = Submit { annotator_id: names[o.annotator].into(), feedback_text: text, accepted_ai: o.accept };
            let res = s.prepare(&task.task_id, &submit).and_then(|e| s.apply(e));
            let owner_ok = task.assigned_annotator == names[o.annotator];
            if res.is_ok() {
                prop_assert!(owner_ok);
                prop_assert_eq!(task.status, TaskStatus::Pending);
            }
            let now = s.progress().done;
            prop_assert!(now >= done);
            done = now;
        }
        for t in &s.tasks {
            let logged = s.log.iter().filter(|e| e.task_id == t.task_id).count();
            prop_assert_eq!(logged, usize::from(t.status == TaskStatus::Done));
            if let Some(e) = s.log.iter().find(|e| e.task_id == t.task_id) {
                prop_assert_eq!(e.record.annotator_id.as_deref(), Some(t.assigned_annotator.as_str()));
            }
        }
    }
}
