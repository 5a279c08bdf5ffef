use super::{PipelineError, Result, Skip};
use crate::corpus::{Bindings, FeedbackRecord, PromptTemplate, QAExample, UNANSWERABLE_PHRASE};
use crate::model::tokenizer::{tokenize, BOS, EOS};

/// One supervised sequence: `context ++ target`, with the loss taken only
/// where the next token belongs to the target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub context: Vec<u32>,
    pub target: Vec<u32>,
    /// One flag per position of `context ++ target`; true exactly on the
    /// target positions.
    pub loss_mask: Vec<bool>,
}

impl TrainingPair {
    /// Left-truncates the context (keeping BOS) so the pair fits in
    /// `max_len` tokens.
    pub fn new(context_text: &str, target_text: &str, max_len: usize) -> Result<Self> {
        let mut target = tokenize(target_text);
        target.push(EOS);
        let body = tokenize(context_text);
        // BOS plus at least one context token
        if target.len() + 2 > max_len {
            return Err(PipelineError::Length(format!("target of {} tokens cannot fit in {max_len}", target.len())));
        }
        let keep = body.len().min(max_len - target.len() - 1);
        let mut context = Vec::with_capacity(keep + 1);
        context.push(BOS);
        context.extend_from_slice(&body[body.len() - keep..]);
        let loss_mask =
            std::iter::repeat(false).take(context.len()).chain(std::iter::repeat(true).take(target.len())).collect();
        Ok(Self { context, target, loss_mask })
    }

    pub fn len(&self) -> usize {
        self.context.len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Model input (all but the last token), next-token targets, and the
    /// mask shifted to align with them.
    pub fn shifted(&self) -> (Vec<u32>, Vec<usize>, Vec<bool>) {
        let seq: Vec<u32> = self.context.iter().chain(&self.target).copied().collect();
        let input = seq[..seq.len() - 1].to_vec();
        let targets = seq[1..].iter().map(|&t| t as usize).collect();
        let mask = self.loss_mask[1..].to_vec();
        (input, targets, mask)
    }
}

/// The answer an ideal model gives: the first gold answer, or the
/// unanswerable phrase.
pub fn gold_text(example: &QAExample) -> &str {
    example.gold_answers.first().map(String::as_str).unwrap_or(UNANSWERABLE_PHRASE)
}

/// Context = feedback-prediction prompt over passage, question and
/// predicted answer; target = the feedback text.
pub fn build_laffi_pair(
    record: &FeedbackRecord,
    example: &QAExample,
    template: &PromptTemplate,
    max_len: usize,
) -> Result<TrainingPair> {
    if record.example_id != example.id {
        return Err(PipelineError::Data(format!(
            "feedback for {} paired with example {}",
            record.example_id, example.id
        )));
    }
    let context = template.render(
        &Bindings {
            passage: Some(&example.passage),
            question: Some(&example.question),
            predicted_answer: Some(&record.predicted_answer),
            gold_answer: None,
        },
        template.exemplars.len(),
    )?;
    TrainingPair::new(&context, &record.feedback_text, max_len)
}

/// Context = the two-shot answer prompt; target = the gold answer text.
pub fn build_sft_pair(example: &QAExample, template: &PromptTemplate, max_len: usize) -> Result<TrainingPair> {
    let context = super::stages::answer_prompt(template, example)?;
    TrainingPair::new(&context, gold_text(example), max_len)
}

/// LaFFi pairs for every feedback record. Records that are too long are
/// skipped and reported; unknown example ids are an error.
pub fn build_laffi_pairs(
    records: &[FeedbackRecord],
    corpus: &[QAExample],
    template: &PromptTemplate,
    max_len: usize,
) -> Result<(Vec<TrainingPair>, Vec<Skip>)> {
    let by_id = crate::corpus::index_by_id(corpus)?;
    let mut pairs = Vec::with_capacity(records.len());
    let mut skips = Vec::new();
    for r in records {
        let ex = by_id
            .get(r.example_id.as_str())
            .ok_or_else(|| PipelineError::Data(format!("feedback refers to unknown example {}", r.example_id)))?;
        match build_laffi_pair(r, ex, template, max_len) {
            Ok(p) => pairs.push(p),
            Err(PipelineError::Length(reason)) => {
                log::warn!("skipping {}: {reason}", r.example_id);
                skips.push(Skip { example_id: r.example_id.clone(), reason });
            }
            Err(e) => return Err(e),
        }
    }
    Ok((pairs, skips))
}

pub fn build_sft_pairs(
    examples: &[QAExample],
    template: &PromptTemplate,
    max_len: usize,
) -> Result<(Vec<TrainingPair>, Vec<Skip>)> {
    let mut pairs = Vec::with_capacity(examples.len());
    let mut skips = Vec::new();
    for ex in examples {
        match build_sft_pair(ex, template, max_len) {
            Ok(p) => pairs.push(p),
            Err(PipelineError::Length(reason)) => {
                log::warn!("skipping {}: {reason}", ex.id);
                skips.push(Skip { example_id: ex.id.clone(), reason });
            }
            Err(e) => return Err(e),
        }
    }
    Ok((pairs, skips))
}
