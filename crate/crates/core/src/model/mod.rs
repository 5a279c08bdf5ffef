//! Byte-level decoder-only transformer.
//!
//! Pre-norm residual blocks with learned absolute positions, GELU MLPs and an
//! untied output head. Attention projections act on column vectors
//! (`q = W_q · x`), so on the row-major activations they are applied as
//! `x · W_qᵀ`; that keeps the LoRA delta `B·A` in its usual orientation.

pub mod checkpoint;
mod forward;
mod generate;
pub mod tokenizer;

pub use forward::{forward, BoundModel, ForwardOptions, ForwardOutput, KvCache};
pub use generate::{generate, Decoding, GenerationConfig};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the limit of {max}")]
    Length { len: usize, max: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail(format!("all dimensions must be positive: {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len < 2 {
            return fail(format!("max_seq_len {} < 2", self.max_seq_len));
        }
        if self.vocab_size < tokenizer::MIN_VOCAB {
            return fail(format!("vocab_size {} < {}", self.vocab_size, tokenizer::MIN_VOCAB));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.d_ff + 4 * d;
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d + d * self.vocab_size
    }
}

/// Desk-scale size presets standing in for a model-scale axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Nano,
    Small,
    Medium,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Nano, Preset::Small, Preset::Medium];

    pub fn config(self, init_seed: u64) -> ModelConfig {
        let (n_layers, n_heads, d_model) = match self {
            Preset::Nano => (2, 2, 32),
            Preset::Small => (4, 4, 64),
            Preset::Medium => (6, 8, 128),
        };
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_ff: 4 * d_model,
            vocab_size: tokenizer::MIN_VOCAB,
            max_seq_len: 512,
            init_seed,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Nano => "nano",
            Preset::Small => "small",
            Preset::Medium => "medium",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nano" => Ok(Preset::Nano),
            "small" => Ok(Preset::Small),
            "medium" => Ok(Preset::Medium),
            other => Err(ModelError::Config(format!("unknown preset {other:?} (expected nano, small or medium)"))),
        }
    }
}

/// The attention projections that can carry an adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Q, Projection::K, Projection::V];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "q" | "q_proj" => Ok(Projection::Q),
            "k" | "k_proj" => Ok(Projection::K),
            "v" | "v_proj" => Ok(Projection::V),
            other => {
                Err(ModelError::Config(format!("unknown projection {other:?} (adapters attach to q, k or v only)")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    pub o_proj: Tensor,
    /// d_model × d_ff
    pub mlp_in: Tensor,
    /// d_ff × d_model
    pub mlp_out: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl LayerWeights {
    pub fn projection(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Q => &self.q_proj,
            Projection::K => &self.k_proj,
            Projection::V => &self.v_proj,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Tensor {
        match p {
            Projection::Q => &mut self.q_proj,
            Projection::K => &mut self.k_proj,
            Projection::V => &mut self.v_proj,
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor); 10] {
        [
            ("q_proj", &self.q_proj),
            ("k_proj", &self.k_proj),
            ("v_proj", &self.v_proj),
            ("o_proj", &self.o_proj),
            ("mlp_in", &self.mlp_in),
            ("mlp_out", &self.mlp_out),
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor); 10] {
        [
            ("q_proj", &mut self.q_proj),
            ("k_proj", &mut self.k_proj),
            ("v_proj", &mut self.v_proj),
            ("o_proj", &mut self.o_proj),
            ("mlp_in", &mut self.mlp_in),
            ("mlp_out", &mut self.mlp_out),
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerWeights {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    /// d_model × vocab_size
    pub output_head: Tensor,
}

impl TransformerWeights {
    /// Every tensor with its stable checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out =
            vec![("tok_emb".to_string(), &self.token_embedding), ("pos_emb".to_string(), &self.position_embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_ln.gain".to_string(), &self.final_ln_gain));
        out.push(("final_ln.bias".to_string(), &self.final_ln_bias));
        out.push(("head".to_string(), &self.output_head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.token_embedding),
            ("pos_emb".to_string(), &mut self.position_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.fields_mut() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_ln.gain".to_string(), &mut self.final_ln_gain));
        out.push(("final_ln.bias".to_string(), &mut self.final_ln_bias));
        out.push(("head".to_string(), &mut self.output_head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_trainable(&mut self, on: bool) {
        for (_, t) in self.named_tensors_mut() {
            t.set_requires_grad(on);
        }
    }

    /// Order-sensitive checksum over every tensor's bits.
    pub fn checksum(&self) -> u64 {
        self.named_tensors().iter().fold(0u64, |acc, (_, t)| acc.rotate_left(7) ^ t.checksum())
    }

    /// Expected shape of every named tensor for `config`.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let mut out = vec![
            ("tok_emb".to_string(), vec![config.vocab_size, d]),
            ("pos_emb".to_string(), vec![config.max_seq_len, d]),
        ];
        for i in 0..config.n_layers {
            for (name, shape) in [
                ("q_proj", vec![d, d]),
                ("k_proj", vec![d, d]),
                ("v_proj", vec![d, d]),
                ("o_proj", vec![d, d]),
                ("mlp_in", vec![d, config.d_ff]),
                ("mlp_out", vec![config.d_ff, d]),
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
            ] {
                out.push((format!("layers.{i}.{name}"), shape));
            }
        }
        out.push(("final_ln.gain".to_string(), vec![d]));
        out.push(("final_ln.bias".to_string(), vec![d]));
        out.push(("head".to_string(), vec![d, config.vocab_size]));
        out
    }
}

/// Gaussian(0, 0.02) projections and embeddings, unit gains, zero biases.
/// All tensors start trainable.
pub fn init_model(config: &ModelConfig) -> Result<TransformerWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let mut gaussian = |shape: Vec<usize>| -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
        let mut t = Tensor::new(shape, data).expect("shape matches data");
        t.set_requires_grad(true);
        t
    };
    let ones = |n: usize| {
        let mut t = Tensor::full(vec![n], 1.0f32);
        t.set_requires_grad(true);
        t
    };
    let zeros = |n: usize| {
        let mut t = Tensor::zeros(vec![n]);
        t.set_requires_grad(true);
        t
    };
    let d = config.d_model;
    let token_embedding = gaussian(vec![config.vocab_size, d]);
    let position_embedding = gaussian(vec![config.max_seq_len, d]);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            q_proj: gaussian(vec![d, d]),
            k_proj: gaussian(vec![d, d]),
            v_proj: gaussian(vec![d, d]),
            o_proj: gaussian(vec![d, d]),
            mlp_in: gaussian(vec![d, config.d_ff]),
            mlp_out: gaussian(vec![config.d_ff, d]),
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
        })
        .collect();
    let output_head = gaussian(vec![d, config.vocab_size]);
    Ok(TransformerWeights {
        config: config.clone(),
        token_embedding,
        position_embedding,
        layers,
        final_ln_gain: ones(d),
        final_ln_bias: zeros(d),
        output_head,
    })
}

/// Post-softmax attention for every layer and head of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub seq_len: usize,
    /// `layers[l][h]` is a row-major T×T matrix.
    pub layers: Vec<Vec<Vec<f32>>>,
}

impl AttentionTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn head(&self, layer: usize, head: usize) -> &[f32] {
        &self.layers[layer][head]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_configs() {
        let mut c = Preset::Nano.config(0);
        c.n_heads = 3;
        assert!(init_model(&c).is_err());
        let mut c = Preset::Nano.config(0);
        c.vocab_size = 258;
        assert!(init_model(&c).is_err());
        let mut c = Preset::Nano.config(0);
        c.max_seq_len = 1;
        assert!(init_model(&c).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let c = Preset::Nano.config(11);
        assert_eq!(init_model(&c).unwrap(), init_model(&c).unwrap());
        let other = init_model(&Preset::Nano.config(12)).unwrap();
        assert_ne!(init_model(&c).unwrap().checksum(), other.checksum());
    }

    #[test]
    fn gains_are_one_and_biases_zero() {
        let w = init_model(&Preset::Nano.config(3)).unwrap();
        for (name, t) in w.named_tensors() {
            if name.ends_with("gain") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with("bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn gaussian_init_has_expected_spread() {
        let w = init_model(&Preset::Small.config(5)).unwrap();
        let data = w.output_head.data();
        let n = data.len() as f64;
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 2e-3);
        assert!((var.sqrt() - INIT_STD).abs() < 2e-3);
    }

    #[test]
    fn parses_presets_and_projections() {
        assert_eq!("Small".parse::<Preset>().unwrap(), Preset::Small);
        assert!("huge".parse::<Preset>().is_err());
        assert_eq!("q_proj".parse::<Projection>().unwrap(), Projection::Q);
        assert!("o".parse::<Projection>().is_err());
    }
}
