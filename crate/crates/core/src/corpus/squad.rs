use std::path::Path;

use serde_json::Value;

use super::{CorpusError, QAExample, Result};

fn parse_err(path: &str, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse { path: path.to_string(), message: message.into() }
}

fn field<'a>(obj: &'a Value, path: &str, key: &str) -> Result<(&'a Value, String)> {
    let child = format!("{path}.{key}");
    let v = obj
        .as_object()
        .ok_or_else(|| parse_err(path, "expected an object"))?
        .get(key)
        .ok_or_else(|| parse_err(&child, "missing field"))?;
    Ok((v, child))
}

fn array<'a>(obj: &'a Value, path: &str, key: &str) -> Result<(&'a Vec<Value>, String)> {
    let (v, p) = field(obj, path, key)?;
    let a = v.as_array().ok_or_else(|| parse_err(&p, "expected an array"))?;
    Ok((a, p))
}

fn string(obj: &Value, path: &str, key: &str) -> Result<String> {
    let (v, p) = field(obj, path, key)?;
    v.as_str().map(str::to_string).ok_or_else(|| parse_err(&p, "expected a string"))
}

/// Reads SQuAD 2.0 JSON (`data → paragraphs → qas`).
pub fn parse_squad(text: &str) -> Result<Vec<QAExample>> {
    let root: Value = serde_json::from_str(text).map_err(|e| parse_err("$", e.to_string()))?;
    let mut out = Vec::new();
    let (articles, data_path) = array(&root, "$", "data")?;
    for (ai, article) in articles.iter().enumerate() {
        let apath = format!("{data_path}[{ai}]");
        let (paragraphs, ppath) = array(article, &apath, "paragraphs")?;
        for (pi, para) in paragraphs.iter().enumerate() {
            let para_path = format!("{ppath}[{pi}]");
            let context = string(para, &para_path, "context")?;
            let (qas, qpath) = array(para, &para_path, "qas")?;
            for (qi, qa) in qas.iter().enumerate() {
                let qa_path = format!("{qpath}[{qi}]");
                let question = string(qa, &qa_path, "question")?;
                let id = string(qa, &qa_path, "id")?;
                let (imp, imp_path) = field(qa, &qa_path, "is_impossible")?;
                let impossible = imp.as_bool().ok_or_else(|| parse_err(&imp_path, "expected a boolean"))?;
                let mut golds: Vec<String> = Vec::new();
                if !impossible {
                    let (answers, ans_path) = array(qa, &qa_path, "answers")?;
                    for (k, ans) in answers.iter().enumerate() {
                        let text = string(ans, &format!("{ans_path}[{k}]"), "text")?;
                        if !context.contains(&text) {
                            return Err(CorpusError::Validation(format!(
                                "{ans_path}[{k}].text {text:?} (question {id}) does not occur in its passage"
                            )));
                        }
                        if !golds.contains(&text) {
                            golds.push(text);
                        }
                    }
                    if golds.is_empty() {
                        return Err(CorpusError::Validation(format!(
                            "{qa_path}: answerable question {id} has no answers"
                        )));
                    }
                }
                out.push(QAExample {
                    id,
                    passage: context.clone(),
                    question,
                    gold_answers: golds,
                    is_answerable: !impossible,
                });
            }
        }
    }
    super::index_by_id(&out)?;
    Ok(out)
}

pub fn load_squad(path: &Path) -> Result<Vec<QAExample>> {
    let text = std::fs::read_to_string(path)?;
    parse_squad(&text)
}
