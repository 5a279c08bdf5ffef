//! Low-rank adapters on the attention Q/K/V projections.
//!
//! An adapter replaces `W·x` with `W·x + (alpha/r)·B·(A·x)`, where `A` is
//! r×d (Gaussian init) and `B` is d×r (zero init), so a freshly attached
//! adapter leaves the model's outputs unchanged. Attaching freezes every
//! base tensor; only `A` and `B` are trainable afterwards.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::checkpoint::{Container, ContainerKind};
use crate::model::{ModelConfig, ModelError, Projection, Result, TransformerWeights, INIT_STD};
use crate::tensor::{kernels, Tensor, TensorError};

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f32 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub layer: usize,
    pub projection: Projection,
}

impl fmt::Display for AdapterTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.projection)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub target: AdapterTarget,
    pub rank: usize,
    pub alpha: f32,
    /// r × d_model
    pub a: Tensor,
    /// d_model × r
    pub b: Tensor,
}

impl LoraAdapter {
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// The dense delta `(alpha/r)·B·A`.
    pub fn delta(&self) -> Result<Tensor> {
        let d = self.b.shape()[0];
        let ba = kernels::matmul(self.b.data(), self.a.data(), d, self.rank, d);
        let s = self.scale();
        Ok(Tensor::new(vec![d, d], ba.into_iter().map(|v| v * s).collect())?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: DEFAULT_RANK, alpha: DEFAULT_ALPHA, targets: Projection::ALL.to_vec() }
    }
}

/// Creates one adapter per (layer, target) and freezes the base weights.
pub fn attach(weights: &mut TransformerWeights, config: &LoraConfig, seed: u64) -> Result<Vec<LoraAdapter>> {
    let targets: BTreeSet<Projection> = config.targets.iter().copied().collect();
    if targets.is_empty() {
        return Err(ModelError::Config("LoRA needs at least one target projection".into()));
    }
    let d = weights.config.d_model;
    if config.rank == 0 || config.rank > d {
        return Err(ModelError::Config(format!("LoRA rank {} must be in 1..={d}", config.rank)));
    }
    if !(config.alpha.is_finite() && config.alpha > 0.0) {
        return Err(ModelError::Config(format!("LoRA alpha {} must be positive", config.alpha)));
    }
    weights.set_trainable(false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let mut adapters = Vec::new();
    for layer in 0..weights.config.n_layers {
        for &projection in &targets {
            let a_data = (0..config.rank * d).map(|_| normal.sample(&mut rng) as f32).collect();
            let mut a = Tensor::new(vec![config.rank, d], a_data)?;
            let mut b = Tensor::zeros(vec![d, config.rank]);
            a.set_requires_grad(true);
            b.set_requires_grad(true);
            adapters.push(LoraAdapter {
                target: AdapterTarget { layer, projection },
                rank: config.rank,
                alpha: config.alpha,
                a,
                b,
            });
        }
    }
    Ok(adapters)
}

/// `W·x + (alpha/r)·B·(A·x)` for a single column vector `x`.
pub fn adapted_projection(w: &Tensor, adapter: &LoraAdapter, x: &[f32]) -> Result<Vec<f32>> {
    let (rows, cols) = w.dims2()?;
    if x.len() != cols || adapter.a.shape() != [adapter.rank, cols] || adapter.b.shape() != [rows, adapter.rank] {
        return Err(TensorError::Shape {
            op: "adapted_projection",
            lhs: w.shape().to_vec(),
            rhs: vec![x.len(), adapter.rank],
        }
        .into());
    }
    let base = kernels::matmul(w.data(), x, rows, cols, 1);
    let down = kernels::matmul(adapter.a.data(), x, adapter.rank, cols, 1);
    let up = kernels::matmul(adapter.b.data(), &down, rows, adapter.rank, 1);
    let s = adapter.scale();
    Ok(base.iter().zip(&up).map(|(&b, &u)| b + s * u).collect())
}

/// Folds every adapter into its base projection.
pub fn merge(weights: &TransformerWeights, adapters: &[LoraAdapter]) -> Result<TransformerWeights> {
    let mut merged = weights.clone();
    for adapter in adapters {
        let layer = adapter.target.layer;
        if layer >= merged.layers.len() {
            return Err(ModelError::Config(format!(
                "adapter {} refers to a missing layer (model has {})",
                adapter.target,
                merged.layers.len()
            )));
        }
        let delta = adapter.delta()?;
        let w = merged.layers[layer].projection_mut(adapter.target.projection);
        if w.shape() != delta.shape() {
            return Err(TensorError::Shape { op: "merge", lhs: w.shape().to_vec(), rhs: delta.shape().to_vec() }.into());
        }
        for (dst, &dv) in w.data_mut().iter_mut().zip(delta.data()) {
            *dst += dv;
        }
    }
    Ok(merged)
}

pub fn adapter_param_count(adapters: &[LoraAdapter]) -> usize {
    adapters.iter().map(LoraAdapter::param_count).sum()
}

/// Adapter parameters over all parameters (base + adapters).
pub fn trainable_fraction(weights: &TransformerWeights, adapters: &[LoraAdapter]) -> f64 {
    let trainable = adapter_param_count(adapters);
    if trainable == 0 {
        return 0.0;
    }
    trainable as f64 / (weights.param_count() + trainable) as f64
}

/// The same ratio for a geometry that is only described, never allocated:
/// each target costs `2·r·d_model` parameters.
pub fn fraction_for_geometry(base_params: u64, n_layers: u64, d_model: u64, n_targets: u64, rank: u64) -> f64 {
    let adapter = n_layers * n_targets * 2 * rank * d_model;
    adapter as f64 / (base_params + adapter) as f64
}

fn metadata_value(a: &LoraAdapter) -> String {
    format!("rank={},alpha={}", a.rank, a.alpha)
}

fn parse_metadata(value: &str) -> Result<(usize, f32)> {
    let bad = || ModelError::Checkpoint(format!("bad adapter metadata {value:?}"));
    let mut rank = None;
    let mut alpha = None;
    for part in value.split(',') {
        match part.split_once('=') {
            Some(("rank", v)) => rank = v.parse().ok(),
            Some(("alpha", v)) => alpha = v.parse().ok(),
            _ => return Err(bad()),
        }
    }
    Ok((rank.ok_or_else(bad)?, alpha.ok_or_else(bad)?))
}

fn parse_target(key: &str) -> Result<AdapterTarget> {
    let bad = || ModelError::Checkpoint(format!("bad adapter target {key:?}"));
    let rest = key.strip_prefix("layers.").ok_or_else(bad)?;
    let (layer, proj) = rest.split_once('.').ok_or_else(bad)?;
    Ok(AdapterTarget { layer: layer.parse().map_err(|_| bad())?, projection: proj.parse().map_err(|_| bad())? })
}

pub fn adapters_to_container(config: &ModelConfig, adapters: &[LoraAdapter]) -> Container {
    let mut metadata = Vec::new();
    let mut tensors = Vec::new();
    for a in adapters {
        metadata.push((a.target.to_string(), metadata_value(a)));
        let mut at = a.a.clone();
        let mut bt = a.b.clone();
        at.set_requires_grad(false);
        bt.set_requires_grad(false);
        tensors.push((format!("{}.lora_a", a.target), at));
        tensors.push((format!("{}.lora_b", a.target), bt));
    }
    Container { kind: ContainerKind::Adapters, config: config.clone(), metadata, tensors }
}

/// Returns the base-model config the adapters were trained against, plus
/// the adapters (trainable).
pub fn adapters_from_container(c: Container) -> Result<(ModelConfig, Vec<LoraAdapter>)> {
    if c.kind != ContainerKind::Adapters {
        return Err(ModelError::Checkpoint("container holds model weights, not adapters".into()));
    }
    if c.tensors.len() != 2 * c.metadata.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} metadata entries but {} tensors",
            c.metadata.len(),
            c.tensors.len()
        )));
    }
    let d = c.config.d_model;
    let mut tensors = c.tensors.into_iter();
    let mut adapters = Vec::with_capacity(c.metadata.len());
    for (key, value) in &c.metadata {
        let target = parse_target(key)?;
        let (rank, alpha) = parse_metadata(value)?;
        if target.layer >= c.config.n_layers || rank == 0 || rank > d || !(alpha > 0.0) {
            return Err(ModelError::Checkpoint(format!("adapter {key} is inconsistent with the model")));
        }
        let (an, mut a) = tensors.next().expect("count checked");
        let (bn, mut b) = tensors.next().expect("count checked");
        if an != format!("{key}.lora_a")
            || bn != format!("{key}.lora_b")
            || a.shape() != [rank, d]
            || b.shape() != [d, rank]
        {
            return Err(ModelError::Checkpoint(format!("adapter {key} tensors are malformed")));
        }
        a.ensure_finite("adapter checkpoint")?;
        b.ensure_finite("adapter checkpoint")?;
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        adapters.push(LoraAdapter { target, rank, alpha, a, b });
    }
    Ok((c.config, adapters))
}

pub fn save_adapters(path: &Path, config: &ModelConfig, adapters: &[LoraAdapter]) -> Result<()> {
    adapters_to_container(config, adapters).write(path)
}

pub fn load_adapters(path: &Path) -> Result<(ModelConfig, Vec<LoraAdapter>)> {
    adapters_from_container(Container::read(path)?)
}
