use super::{PipelineError, Result, TrainConfig, TrainingPair};
use crate::corpus::shuffled;
use crate::io::derive_seed;
use crate::lora::LoraAdapter;
use crate::model::{BoundModel, ForwardOptions, TransformerWeights};
use crate::tensor::{AdamW, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Mean masked loss of each optimizer step, before that step's update.
    pub losses: Vec<f32>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f32> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f32> {
        self.losses.last().copied()
    }
}

/// Sum over `batch` of each sequence's masked loss, all divided by the
/// batch's total target count. Sequences are run separately on one graph,
/// which gives the same value as padding them to a common length and
/// masking the pad positions.
pub(super) fn batch_loss<'a>(
    g: &mut Graph,
    bound: &BoundModel,
    batch: impl Iterator<Item = &'a TrainingPair> + Clone,
) -> Result<Var> {
    let denom: usize = batch.clone().map(|p| p.target.len()).sum();
    let mut total: Option<Var> = None;
    for pair in batch {
        let (input, targets, mask) = pair.shifted();
        let out = bound.forward(g, &input, ForwardOptions::default())?;
        let l = g.cross_entropy_with_denominator(out.logits, &targets, &mask, denom.max(1) as f32)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    total.ok_or_else(|| PipelineError::Config("empty batch".into()))
}

/// Minimizes masked cross-entropy over shuffled mini-batches, updating only
/// the adapters. `weights` is borrowed immutably and cannot change.
pub fn train(
    weights: &TransformerWeights,
    adapters: &mut [LoraAdapter],
    pairs: &[TrainingPair],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(PipelineError::Config("no training pairs".into()));
    }
    if adapters.is_empty() {
        return Err(PipelineError::Config("no adapters attached".into()));
    }
    let limit = weights.config.max_seq_len + 1;
    if let Some(p) = pairs.iter().find(|p| p.len() > limit || p.len() < 2) {
        return Err(PipelineError::Length(format!("pair of {} tokens does not fit the model (max {limit})", p.len())));
    }
    let mut opt = AdamW::new(config.adamw())?;
    let indices: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs * pairs.len().div_ceil(config.batch_size));
    for epoch in 0..config.epochs {
        let order = shuffled(&indices, derive_seed(config.seed, &format!("train.epoch.{epoch}")));
        for batch in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let bound = BoundModel::bind(&mut g, weights, adapters)?;
            let loss = batch_loss(&mut g, &bound, batch.iter().map(|&i| &pairs[i]))?;
            g.backward(loss)?;
            losses.push(g.scalar(loss));
            for (a, (va, vb)) in adapters.iter_mut().zip(bound.adapter_vars()) {
                g.accumulate_into(va, &mut a.a)?;
                g.accumulate_into(vb, &mut a.b)?;
            }
            let mut params: Vec<&mut Tensor> = adapters.iter_mut().flat_map(|a| [&mut a.a, &mut a.b]).collect();
            opt.step(&mut params)?;
        }
        log::info!(
            "epoch {}/{}: last loss {:.4}",
            epoch + 1,
            config.epochs,
            losses.last().copied().unwrap_or(f32::NAN)
        );
    }
    Ok(TrainOutcome { losses })
}
