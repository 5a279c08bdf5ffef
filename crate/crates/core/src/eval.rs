//! SQuAD-2.0-style answer scoring: exact match, token F1/precision/recall,
//! and the "cannot be found" convention for unanswerable questions.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, QAExample, UNANSWERABLE_PHRASE};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, split on
/// whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text.to_lowercase().chars().filter(|c| !c.is_ascii_punctuation()).collect();
    cleaned.split_whitespace().filter(|t| !matches!(*t, "a" | "an" | "the")).map(str::to_string).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Multiset token overlap. Both empty scores 1, exactly one empty scores 0.
pub fn prf(pred: &[String], gold: &[String]) -> Prf {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return Prf { precision: 1.0, recall: 1.0, f1: 1.0 },
        (true, false) | (false, true) => return Prf { precision: 0.0, recall: 0.0, f1: 0.0 },
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_str()).filter(|c| **c > 0) {
            *c -= 1;
            common += 1;
        }
    }
    if common == 0 {
        return Prf { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    Prf { precision, recall, f1: 2.0 * precision * recall / (precision + recall) }
}

/// True iff the normalized unanswerable phrase occurs contiguously in the
/// normalized prediction.
pub fn classify_unanswerable(pred: &str) -> bool {
    let needle = normalize(UNANSWERABLE_PHRASE);
    let hay = normalize(pred);
    hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub example_id: String,
    pub exact_match: u8,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub predicted_unanswerable: bool,
}

pub fn score_example(pred: &str, example: &QAExample) -> ExampleScore {
    let predicted_unanswerable = classify_unanswerable(pred);
    let flat = |hit: bool| {
        let v = if hit { 1.0 } else { 0.0 };
        ExampleScore {
            example_id: example.id.clone(),
            exact_match: u8::from(hit),
            f1: v,
            precision: v,
            recall: v,
            predicted_unanswerable,
        }
    };
    if !example.is_answerable {
        return flat(predicted_unanswerable);
    }
    if predicted_unanswerable {
        return flat(false);
    }
    let p = normalize(pred);
    let mut em = false;
    let mut best: Option<Prf> = None;
    for g in &example.gold_answers {
        let gt = normalize(g);
        em |= p == gt;
        let s = prf(&p, &gt);
        if best.map_or(true, |b| s.f1 > b.f1) {
            best = Some(s);
        }
    }
    let best = best.unwrap_or(Prf { precision: 0.0, recall: 0.0, f1: 0.0 });
    ExampleScore {
        example_id: example.id.clone(),
        exact_match: u8::from(em),
        f1: best.f1,
        precision: best.precision,
        recall: best.recall,
        predicted_unanswerable,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// Mean exact match, percent.
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Dataset examples that had no prediction (scored as an empty answer).
    #[serde(default)]
    pub missing: usize,
    pub scores: Vec<ExampleScore>,
}

/// Sum of values in ascending order, so the result is independent of the
/// order the examples arrived in.
fn order_free_mean(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn aggregate(scores: Vec<ExampleScore>) -> Result<EvalReport> {
    if scores.is_empty() {
        return Err(EvalError::Usage("cannot aggregate zero scores".into()));
    }
    let pct = |f: &dyn Fn(&ExampleScore) -> f64| 100.0 * order_free_mean(scores.iter().map(f).collect());
    Ok(EvalReport {
        n: scores.len(),
        accuracy: pct(&|s| f64::from(s.exact_match)),
        f1: pct(&|s| s.f1),
        precision: pct(&|s| s.precision),
        recall: pct(&|s| s.recall),
        missing: 0,
        scores,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    #[serde(alias = "predicted_answer")]
    pub prediction: String,
}

/// Reads prediction JSONL. Each line needs `example_id` plus `prediction`
/// (or `predicted_answer`, so Stage-1 output can be scored directly).
pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line)
            .map_err(|e| CorpusError::Parse { path: format!("line {}", i + 1), message: e.to_string() })?;
        out.push(p);
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    parse_predictions(&std::fs::read_to_string(path)?)
}

/// Scores every dataset example in dataset order.
pub fn evaluate(predictions: &[Prediction], dataset: &[QAExample]) -> Result<EvalReport> {
    let by_id = corpus::index_by_id(dataset)?;
    let mut preds: HashMap<&str, &str> = HashMap::new();
    for p in predictions {
        if !by_id.contains_key(p.example_id.as_str()) {
            return Err(EvalError::Data(format!("prediction for unknown example {}", p.example_id)));
        }
        if preds.insert(&p.example_id, &p.prediction).is_some() {
            return Err(EvalError::Data(format!("duplicate prediction for {}", p.example_id)));
        }
    }
    let mut missing = HashSet::new();
    let scores = dataset
        .iter()
        .map(|ex| {
            let pred = preds.get(ex.id.as_str()).copied().unwrap_or_else(|| {
                missing.insert(ex.id.as_str());
                ""
            });
            score_example(pred, ex)
        })
        .collect();
    let mut report = aggregate(scores)?;
    report.missing = missing.len();
    Ok(report)
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| EvalError::Data(e.to_string()))?;
    text.push('\n');
    crate::io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn write_scores_csv(path: &Path, scores: &[ExampleScore]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in scores {
        w.serialize(s)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Data(e.to_string()))?;
    crate::io::write_atomic(path, &bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize("The Cat!"), toks(&["cat"]));
        assert!(normalize("").is_empty());
        assert!(normalize("a an the").is_empty());
        assert_eq!(normalize("  Theory  of A-B "), toks(&["theory", "of", "ab"]));
    }

    #[test]
    fn prf_cases() {
        let p = prf(&toks(&["beyonce", "giselle"]), &toks(&["beyonce"]));
        assert_eq!(p.precision, 0.5);
        assert_eq!(p.recall, 1.0);
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(prf(&toks(&["x"]), &toks(&["y"])).f1, 0.0);
        assert_eq!(prf(&[], &[]).f1, 1.0);
        assert_eq!(prf(&toks(&["x"]), &[]).precision, 0.0);
        let rep = prf(&toks(&["a1", "a1", "b"]), &toks(&["a1"]));
        assert_eq!((rep.precision, rep.recall), (1.0 / 3.0, 1.0));
    }

    #[test]
    fn unanswerable_detection() {
        assert!(classify_unanswerable("The answer cannot be found."));
        assert!(!classify_unanswerable("Beyonce"));
        assert!(classify_unanswerable("I think the answer cannot be found here"));
        assert!(!classify_unanswerable("answer cannot be"));
    }

    fn ex(id: &str, golds: &[&str]) -> QAExample {
        QAExample {
            id: id.into(),
            passage: String::new(),
            question: String::new(),
            gold_answers: golds.iter().map(|g| g.to_string()).collect(),
            is_answerable: !golds.is_empty(),
        }
    }

    #[test]
    fn scoring_rules() {
        let s = score_example("the answer cannot be found", &ex("u", &[]));
        assert_eq!((s.exact_match, s.f1), (1, 1.0));
        let s = score_example("Beyonce", &ex("u", &[]));
        assert_eq!((s.exact_match, s.f1), (0, 0.0));
        let s = score_example("the answer cannot be found", &ex("a", &["Beyonce"]));
        assert_eq!((s.exact_match, s.f1, s.precision, s.recall), (0, 0.0, 0.0, 0.0));
        let s = score_example("2010", &ex("a", &["in 2010", "2010"]));
        assert_eq!((s.exact_match, s.f1), (1, 1.0));
    }

    #[test]
    fn empty_aggregate_is_usage_error() {
        assert!(matches!(aggregate(vec![]), Err(EvalError::Usage(_))));
    }

    #[test]
    fn evaluate_handles_missing_and_unknown() {
        let ds = vec![ex("a", &["x"]), ex("b", &[])];
        let preds = vec![Prediction { example_id: "a".into(), prediction: "x".into() }];
        let r = evaluate(&preds, &ds).unwrap();
        assert_eq!((r.n, r.missing, r.accuracy), (2, 1, 50.0));
        let unknown = vec![Prediction { example_id: "zz".into(), prediction: "x".into() }];
        assert!(evaluate(&unknown, &ds).is_err());
    }

    #[test]
    fn predictions_accept_either_field_name() {
        let text = "{\"example_id\":\"a\",\"prediction\":\"x\"}\n{\"schema_version\":1,\"example_id\":\"b\",\"model_id\":\"m\",\"prompt_fingerprint\":\"f\",\"predicted_answer\":\"y\"}\n";
        let p = parse_predictions(text).unwrap();
        assert_eq!(p[1].prediction, "y");
    }
}
