use std::collections::HashMap;

use super::{gold_text, PipelineError, Result, Skip};
use crate::corpus::{self, Bindings, FeedbackRecord, FeedbackSource, PredictedAnswerRecord, PromptTemplate, QAExample};
use crate::eval::score_example;
use crate::io::sha256_hex;
use crate::lora::LoraAdapter;
use crate::model::{generate, GenerationConfig, ModelError, TransformerWeights};

/// Exemplars shown before every answer-prediction query.
pub const ANSWER_SHOTS: usize = 2;

/// Annotator id carried by feedback written from the gold answers, which
/// stands in for human annotation in unattended runs.
pub const REFERENCE_ANNOTATOR: &str = "reference";

pub fn answer_prompt(template: &PromptTemplate, example: &QAExample) -> Result<String> {
    Ok(template.render(
        &Bindings { passage: Some(&example.passage), question: Some(&example.question), ..Default::default() },
        ANSWER_SHOTS,
    )?)
}

fn annotation_prompt(template: &PromptTemplate, example: &QAExample, predicted: &str) -> Result<String> {
    Ok(template.render(
        &Bindings {
            passage: Some(&example.passage),
            question: Some(&example.question),
            predicted_answer: Some(predicted),
            gold_answer: Some(gold_text(example)),
        },
        template.exemplars.len(),
    )?)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage1Output {
    pub records: Vec<PredictedAnswerRecord>,
    pub skips: Vec<Skip>,
}

/// Generates an answer for every example. Records in `existing` whose
/// model id and prompt fingerprint still match are reused unchanged, so an
/// interrupted run resumes where it stopped.
pub fn stage1_predict(
    weights: &TransformerWeights,
    adapters: &[LoraAdapter],
    examples: &[QAExample],
    template: &PromptTemplate,
    gen: &GenerationConfig,
    model_id: &str,
    existing: &[PredictedAnswerRecord],
) -> Result<Stage1Output> {
    template.validate_answer_template()?;
    let done: HashMap<&str, &PredictedAnswerRecord> = existing.iter().map(|r| (r.example_id.as_str(), r)).collect();
    let mut out = Stage1Output::default();
    for ex in examples {
        let prompt = answer_prompt(template, ex)?;
        let fingerprint = sha256_hex(prompt.as_bytes());
        if let Some(r) =
            done.get(ex.id.as_str()).filter(|r| r.model_id == model_id && r.prompt_fingerprint == fingerprint)
        {
            out.records.push((*r).clone());
            continue;
        }
        match generate(weights, adapters, &prompt, gen) {
            Ok(text) => out.records.push(PredictedAnswerRecord {
                example_id: ex.id.clone(),
                model_id: model_id.to_string(),
                prompt_fingerprint: fingerprint,
                predicted_answer: text.trim().to_string(),
            }),
            Err(ModelError::Length { len, max }) => {
                log::warn!("stage 1: skipping {} ({len} tokens > {max})", ex.id);
                out.skips.push(Skip {
                    example_id: ex.id.clone(),
                    reason: format!("prompt plus generation budget is {len} tokens, limit {max}"),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn evidence_sentence<'a>(passage: &'a str, answer: &str) -> Option<&'a str> {
    passage.split_inclusive(". ").map(str::trim).find(|s| s.contains(answer))
}

/// Feedback written from the gold answer: the correct answer, whether the
/// prediction is right, and the supporting sentence.
pub fn reference_feedback(example: &QAExample, predicted: &str) -> String {
    let gold = gold_text(example);
    let verdict = if score_example(predicted, example).exact_match == 1 { "correct" } else { "incorrect" };
    let rationale = if example.is_answerable {
        match evidence_sentence(&example.passage, gold) {
            Some(s) => format!("The passage says: {s}"),
            None => "The passage contains it.".to_string(),
        }
    } else {
        "The passage does not say.".to_string()
    };
    format!("The correct answer is \"{gold}\". The predicted answer \"{predicted}\" is {verdict}. {rationale}")
}

fn lookup<'a>(by_id: &HashMap<&str, &'a QAExample>, id: &str) -> Result<&'a QAExample> {
    by_id
        .get(id)
        .copied()
        .ok_or_else(|| PipelineError::Data(format!("predicted answer refers to unknown example {id}")))
}

/// Asks the model for feedback on each predicted answer, showing it the
/// gold answer. Empty or impossible generations are replaced by
/// [`reference_feedback`] and flagged.
pub fn stage2_ai_annotate(
    weights: &TransformerWeights,
    adapters: &[LoraAdapter],
    records: &[PredictedAnswerRecord],
    corpus_examples: &[QAExample],
    template: &PromptTemplate,
    gen: &GenerationConfig,
) -> Result<Vec<FeedbackRecord>> {
    let by_id = corpus::index_by_id(corpus_examples)?;
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let ex = lookup(&by_id, &r.example_id)?;
        let prompt = annotation_prompt(template, ex, &r.predicted_answer)?;
        let generated = match generate(weights, adapters, &prompt, gen) {
            Ok(text) => text.trim().to_string(),
            Err(ModelError::Length { len, max }) => {
                log::warn!("stage 2: {} does not fit ({len} > {max}), using fallback", r.example_id);
                String::new()
            }
            Err(e) => return Err(e.into()),
        };
        let fallback = generated.is_empty();
        out.push(FeedbackRecord {
            example_id: r.example_id.clone(),
            predicted_answer: r.predicted_answer.clone(),
            feedback_text: if fallback { reference_feedback(ex, &r.predicted_answer) } else { generated },
            source: FeedbackSource::Ai,
            annotator_id: None,
            accepted_ai: None,
            fallback,
        });
    }
    Ok(out)
}

/// HUMAN-tagged feedback produced by [`reference_feedback`], for runs
/// without people in the loop.
pub fn simulate_human_feedback(
    records: &[PredictedAnswerRecord],
    corpus_examples: &[QAExample],
) -> Result<Vec<FeedbackRecord>> {
    let by_id = corpus::index_by_id(corpus_examples)?;
    records
        .iter()
        .map(|r| {
            let ex = lookup(&by_id, &r.example_id)?;
            Ok(FeedbackRecord {
                example_id: r.example_id.clone(),
                predicted_answer: r.predicted_answer.clone(),
                feedback_text: reference_feedback(ex, &r.predicted_answer),
                source: FeedbackSource::Human,
                annotator_id: Some(REFERENCE_ANNOTATOR.to_string()),
                accepted_ai: Some(false),
                fallback: false,
            })
        })
        .collect()
}
