use laffi_core::corpus::{read_jsonl, QAExample};
use laffi_core::eval::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Counts common tokens by merging the two sorted lists.
fn oracle(pred: &[String], gold: &[String]) -> Prf {
    let zero = Prf { precision: 0.0, recall: 0.0, f1: 0.0 };
    if pred.is_empty() && gold.is_empty() {
        return Prf { precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    if pred.is_empty() || gold.is_empty() {
        return zero;
    }
    let mut a = pred.to_vec();
    let mut b = gold.to_vec();
    a.sort();
    b.sort();
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    if common == 0 {
        return zero;
    }
    let p = common as f64 / a.len() as f64;
    let r = common as f64 / b.len() as f64;
    Prf { precision: p, recall: r, f1: 2.0 * p * r / (p + r) }
}

fn random_tokens(rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.gen_range(0..8);
    (0..n).map(|_| ["x", "y", "z", "w", "v"][rng.gen_range(0..5)].to_string()).collect()
}

#[test]
fn prf_matches_multiset_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let p = random_tokens(&mut rng);
        let g = random_tokens(&mut rng);
        assert_eq!(prf(&p, &g), oracle(&p, &g), "{p:?} vs {g:?}");
    }
}

#[test]
fn hand_scored_fixture() {
    let data: Vec<QAExample> = read_jsonl(&fixture("eval_dataset.jsonl")).unwrap();
    let preds = read_predictions(&fixture("eval_predictions.jsonl")).unwrap();
    let r = evaluate(&preds, &data).unwrap();
    assert_eq!(r.n, 4);
    assert_eq!(r.missing, 0);
    // per example (EM, P, R, F1):
    // e1 1, 1, 1, 1 / e2 0, 2/3, 2/3, 2/3 / e3 1, 1, 1, 1 / e4 0, 1/3, 1, 1/2
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    assert!(close(r.accuracy, 50.0), "{}", r.accuracy);
    assert!(close(r.precision, 75.0), "{}", r.precision);
    assert!(close(r.recall, 100.0 * 11.0 / 12.0), "{}", r.recall);
    assert!(close(r.f1, 100.0 * 19.0 / 24.0), "{}", r.f1);
    let e4 = r.scores.iter().find(|s| s.example_id == "e4").unwrap();
    assert!(close(e4.f1, 0.5) && close(e4.recall, 1.0));
    assert!(r.scores.iter().find(|s| s.example_id == "e3").unwrap().predicted_unanswerable);
}

#[test]
fn unanswerable_rules() {
    let ex = |answerable: bool| QAExample {
        id: "u".into(),
        passage: "p".into(),
        question: "q".into(),
        gold_answers: if answerable { vec!["the answer".into()] } else { vec![] },
        is_answerable: answerable,
    };
    assert_eq!(score_example("Sorry, the answer cannot be found!", &ex(false)).exact_match, 1);
    assert_eq!(score_example("answer", &ex(false)).f1, 0.0);
    // answerable question answered with the phrase scores zero even on overlap
    assert_eq!(score_example("the answer cannot be found", &ex(true)).f1, 0.0);
    assert!(!classify_unanswerable("the answer can be found"));
}

#[test]
fn evaluate_errors_and_missing() {
    let data: Vec<QAExample> = read_jsonl(&fixture("eval_dataset.jsonl")).unwrap();
    let p = |id: &str| Prediction { example_id: id.into(), prediction: "x".into() };
    assert!(matches!(evaluate(&[p("zz")], &data), Err(EvalError::Data(_))));
    assert!(matches!(evaluate(&[p("e1"), p("e1")], &data), Err(EvalError::Data(_))));
    let r = evaluate(&[p("e1")], &data).unwrap();
    assert_eq!((r.n, r.missing), (4, 3));
    assert!(aggregate(vec![]).is_err());
}

#[test]
fn report_files() {
    let data: Vec<QAExample> = read_jsonl(&fixture("eval_dataset.jsonl")).unwrap();
    let preds = read_predictions(&fixture("eval_predictions.jsonl")).unwrap();
    let r = evaluate(&preds, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report_json(&dir.path().join("r.json"), &r).unwrap();
    let back: EvalReport = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(back, r);
    write_scores_csv(&dir.path().join("s.csv"), &r.scores).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

proptest! {
    #[test]
    fn prf_symmetry(p in prop::collection::vec("[abc]", 0..6), g in prop::collection::vec("[abc]", 0..6)) {
        let a = prf(&p, &g);
        let b = prf(&g, &p);
        prop_assert_eq!(a.precision, b.recall);
        prop_assert_eq!(a.recall, b.precision);
        prop_assert_eq!(a.f1, b.f1);
        prop_assert!((0.0..=1.0).contains(&a.f1));
    }

    #[test]
    fn aggregate_is_order_free(seed: u64) {
        let data: Vec<QAExample> = read_jsonl(&fixture("eval_dataset.jsonl")).unwrap();
        let preds = read_predictions(&fixture("eval_predictions.jsonl")).unwrap();
        let a = evaluate(&preds, &data).unwrap();
        let shuffled = laffi_core::corpus::shuffled(&preds, seed);
        let b = evaluate(&shuffled, &data).unwrap();
        prop_assert_eq!((a.accuracy, a.f1, a.precision, a.recall), (b.accuracy, b.f1, b.precision, b.recall));
    }

    #[test]
    fn normalize_is_idempotent(s in "[A-Za-z ,.!']{0,40}") {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once.join(" ")), once);
    }
}
