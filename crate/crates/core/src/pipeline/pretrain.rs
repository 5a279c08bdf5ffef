use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::batch_loss;
use super::{gold_text, PipelineError, Result, TrainingPair};
use crate::corpus::QAExample;
use crate::model::tokenizer::{tokenize, BOS, EOS};
use crate::model::{init_model, BoundModel, ModelConfig, TransformerWeights};
use crate::tensor::{AdamW, AdamWConfig, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 2, lr: 3e-3, seed: 0 }
    }
}

pub struct PretrainOutcome {
    pub weights: TransformerWeights,
    pub losses: Vec<f32>,
}

/// Plain-text QA documents in the same `P:`/`Q:`/`A:` layout the answer
/// prompts use.
pub fn pretrain_documents(examples: &[QAExample]) -> Vec<String> {
    examples.iter().map(|ex| format!("P: {}\nQ: {}\nA: {}\n", ex.passage, ex.question, gold_text(ex))).collect()
}

/// Next-byte language modelling over `docs`, updating every weight. The
/// documents (each BOS … EOS) are concatenated into one stream and every
/// step trains on `batch_size` windows of the model's full context drawn
/// at seeded random offsets, so all positions see training.
pub fn pretrain_toy(config: &ModelConfig, docs: &[String], pc: &PretrainConfig) -> Result<PretrainOutcome> {
    if docs.is_empty() {
        return Err(PipelineError::Config("no pre-training documents".into()));
    }
    if pc.batch_size == 0 {
        return Err(PipelineError::Config("batch_size must be at least 1".into()));
    }
    let mut weights = init_model(config)?;
    let mut stream = Vec::new();
    for d in docs {
        stream.push(BOS);
        stream.extend(tokenize(d));
        stream.push(EOS);
    }
    let window = (config.max_seq_len + 1).min(stream.len());
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed);
    let mut opt = AdamW::new(AdamWConfig { lr: pc.lr, ..AdamWConfig::default() })?;
    let mut losses = Vec::with_capacity(pc.steps);
    for _ in 0..pc.steps {
        let batch: Vec<TrainingPair> = (0..pc.batch_size)
            .map(|_| {
                let start = rng.gen_range(0..(stream.len() - window + 1) as u64) as usize;
                let chunk = &stream[start..start + window];
                TrainingPair {
                    context: chunk[..1].to_vec(),
                    target: chunk[1..].to_vec(),
                    loss_mask: std::iter::once(false).chain(std::iter::repeat(true).take(window - 1)).collect(),
                }
            })
            .collect();
        let mut g = Graph::new();
        let bound = BoundModel::bind(&mut g, &weights, &[])?;
        let loss = batch_loss(&mut g, &bound, batch.iter())?;
        g.backward(loss)?;
        losses.push(g.scalar(loss));
        let vars = bound.weight_vars();
        let mut params: Vec<&mut Tensor> = weights.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
        for (v, p) in vars.into_iter().zip(params.iter_mut()) {
            g.accumulate_into(v, p)?;
        }
        opt.step(&mut params)?;
    }
    Ok(PretrainOutcome { weights, losses })
}
