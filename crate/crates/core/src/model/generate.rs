use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::KvCache;
use super::tokenizer::{self, BOS, EOS};
use super::{BoundModel, ModelError, Result, TransformerWeights};
use crate::lora::LoraAdapter;
use crate::tensor::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
    Temperature { tau: f32, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub decoding: Decoding,
    pub stop_sequences: Vec<String>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { max_new_tokens: 64, decoding: Decoding::Greedy, stop_sequences: vec!["\n".to_string()] }
    }
}

/// First position at which any stop sequence starts, if one is complete.
fn find_stop(bytes: &[u8], stops: &[String]) -> Option<usize> {
    stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| {
            let needle = s.as_bytes();
            bytes.windows(needle.len()).position(|w| w == needle)
        })
        .min()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(row: &[f32], tau: f32, rng: &mut ChaCha8Rng) -> usize {
    let tau = f64::from(tau.max(1e-6));
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let weights: Vec<f64> = row.iter().map(|&v| ((v as f64 - max) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Autoregressive decoding from `prompt` (prefixed with BOS). Stops at EOS,
/// at the first stop sequence (which is cut from the result), or after
/// `max_new_tokens`.
pub fn generate(
    weights: &TransformerWeights,
    adapters: &[LoraAdapter],
    prompt: &str,
    config: &GenerationConfig,
) -> Result<String> {
    let mut tokens = vec![BOS];
    tokens.extend(tokenizer::tokenize(prompt));
    let max = weights.config.max_seq_len;
    if tokens.len() + config.max_new_tokens > max {
        return Err(ModelError::Length { len: tokens.len() + config.max_new_tokens, max });
    }
    let mut rng = match config.decoding {
        Decoding::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Decoding::Greedy => None,
    };
    let mut out: Vec<u8> = Vec::new();
    let mut g = Graph::inference();
    let bound = BoundModel::bind(&mut g, weights, adapters)?;
    let base_len = g.len();
    let mut cache = KvCache::default();
    for step in 0..config.max_new_tokens {
        // Drop the previous step's nodes and keep the bound weights.
        g.truncate(base_len);
        let logits = if step == 0 {
            bound.prefill(&mut g, &tokens, &mut cache)?
        } else {
            bound.step(&mut g, *tokens.last().expect("prompt has BOS"), &mut cache)?
        };
        let row = g.value(logits);
        let next = match (config.decoding, rng.as_mut()) {
            (Decoding::Temperature { tau, .. }, Some(r)) => sample(row, tau, r),
            _ => argmax(row),
        } as u32;
        if next == EOS {
            break;
        }
        tokens.push(next);
        if let Ok(b) = u8::try_from(next) {
            out.push(b);
            if let Some(cut) = find_stop(&out, &config.stop_sequences) {
                out.truncate(cut);
                break;
            }
        }
    }
    Ok(String::from_utf8_lossy(&out).into_owned())
}
