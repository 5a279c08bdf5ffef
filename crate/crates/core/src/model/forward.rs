use super::{AttentionTrace, ModelError, Projection, Result, TransformerWeights, LAYER_NORM_EPS};
use crate::lora::LoraAdapter;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub capture_trace: bool,
    /// Only compute logits for the final position (generation).
    pub last_position_only: bool,
}

/// Keys and values of every position seen so far, one row-major T×d
/// buffer per layer, for incremental decoding.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub struct ForwardOutput {
    /// T×vocab (or 1×vocab with `last_position_only`).
    pub logits: Var,
    pub trace: Option<AttentionTrace>,
}

struct LayerVars {
    q: Var,
    k: Var,
    v: Var,
    o: Var,
    mlp_in: Var,
    mlp_out: Var,
    ln1_gain: Var,
    ln1_bias: Var,
    ln2_gain: Var,
    ln2_bias: Var,
}

struct AdapterVars {
    layer: usize,
    projection: Projection,
    a: Var,
    b: Var,
    scale: f32,
}

/// Model weights (and optional adapters) placed on a graph once, so any
/// number of sequences can be run through them and share gradients.
pub struct BoundModel<'w> {
    weights: &'w TransformerWeights,
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    final_gain: Var,
    final_bias: Var,
    head: Var,
    adapters: Vec<AdapterVars>,
}

impl<'w> BoundModel<'w> {
    pub fn bind(g: &mut Graph, weights: &'w TransformerWeights, adapters: &[LoraAdapter]) -> Result<Self> {
        let cfg = &weights.config;
        for a in adapters {
            if a.target.layer >= cfg.n_layers {
                return Err(ModelError::Config(format!(
                    "adapter targets layer {} but the model has {}",
                    a.target.layer, cfg.n_layers
                )));
            }
            if a.a.shape() != [a.rank, cfg.d_model] || a.b.shape() != [cfg.d_model, a.rank] {
                return Err(ModelError::Config(format!(
                    "adapter {} has shapes {:?}/{:?}, expected rank {} over d_model {}",
                    a.target,
                    a.a.shape(),
                    a.b.shape(),
                    a.rank,
                    cfg.d_model
                )));
            }
        }
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in &weights.layers {
            layers.push(LayerVars {
                q: g.leaf(&l.q_proj)?,
                k: g.leaf(&l.k_proj)?,
                v: g.leaf(&l.v_proj)?,
                o: g.leaf(&l.o_proj)?,
                mlp_in: g.leaf(&l.mlp_in)?,
                mlp_out: g.leaf(&l.mlp_out)?,
                ln1_gain: g.leaf(&l.ln1_gain)?,
                ln1_bias: g.leaf(&l.ln1_bias)?,
                ln2_gain: g.leaf(&l.ln2_gain)?,
                ln2_bias: g.leaf(&l.ln2_bias)?,
            });
        }
        let mut bound_adapters = Vec::with_capacity(adapters.len());
        for a in adapters {
            bound_adapters.push(AdapterVars {
                layer: a.target.layer,
                projection: a.target.projection,
                a: g.leaf(&a.a)?,
                b: g.leaf(&a.b)?,
                scale: a.scale(),
            });
        }
        Ok(Self {
            weights,
            tok_emb: g.leaf(&weights.token_embedding)?,
            pos_emb: g.leaf(&weights.position_embedding)?,
            layers,
            final_gain: g.leaf(&weights.final_ln_gain)?,
            final_bias: g.leaf(&weights.final_ln_bias)?,
            head: g.leaf(&weights.output_head)?,
            adapters: bound_adapters,
        })
    }

    /// Graph handles of each adapter's (A, B), in the order they were bound.
    pub fn adapter_vars(&self) -> Vec<(Var, Var)> {
        self.adapters.iter().map(|a| (a.a, a.b)).collect()
    }

    /// Graph handles of the base weights, in `named_tensors` order.
    pub fn weight_vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([l.q, l.k, l.v, l.o, l.mlp_in, l.mlp_out, l.ln1_gain, l.ln1_bias, l.ln2_gain, l.ln2_bias]);
        }
        out.extend([self.final_gain, self.final_bias, self.head]);
        out
    }

    fn project(&self, g: &mut Graph, x: Var, layer: usize, projection: Projection) -> Result<Var> {
        let lv = &self.layers[layer];
        let w = match projection {
            Projection::Q => lv.q,
            Projection::K => lv.k,
            Projection::V => lv.v,
        };
        let mut y = g.matmul_t(x, w)?;
        for a in self.adapters.iter().filter(|a| a.layer == layer && a.projection == projection) {
            let down = g.matmul_t(x, a.a)?;
            let up = g.matmul_t(down, a.b)?;
            let delta = g.scale(up, a.scale)?;
            y = g.add(y, delta)?;
        }
        Ok(y)
    }

    pub fn forward(&self, g: &mut Graph, tokens: &[u32], opts: ForwardOptions) -> Result<ForwardOutput> {
        self.run(g, tokens, opts, None)
    }

    /// Full forward pass over `tokens` that also fills `cache`; returns the
    /// last position's logits. Inference graphs only.
    pub fn prefill(&self, g: &mut Graph, tokens: &[u32], cache: &mut KvCache) -> Result<Var> {
        let opts = ForwardOptions { capture_trace: false, last_position_only: true };
        Ok(self.run(g, tokens, opts, Some(cache))?.logits)
    }

    /// Logits (1×vocab) for `token` placed after everything in `cache`,
    /// which is extended by one position.
    pub fn step(&self, g: &mut Graph, token: u32, cache: &mut KvCache) -> Result<Var> {
        let cfg = &self.weights.config;
        let pos = cache.len;
        if pos >= cfg.max_seq_len || cache.keys.len() != cfg.n_layers {
            return Err(ModelError::Length { len: pos + 1, max: cfg.max_seq_len });
        }
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let tok = g.gather_rows(self.tok_emb, &[token as usize])?;
        let p = g.gather_rows(self.pos_emb, &[pos])?;
        let mut h = g.add(tok, p)?;
        for (li, lv) in self.layers.iter().enumerate() {
            let a = g.layer_norm(h, lv.ln1_gain, lv.ln1_bias, LAYER_NORM_EPS)?;
            let q = self.project(g, a, li, Projection::Q)?;
            let k = self.project(g, a, li, Projection::K)?;
            let v = self.project(g, a, li, Projection::V)?;
            cache.keys[li].extend_from_slice(g.value(k));
            cache.values[li].extend_from_slice(g.value(v));
            let keys = g.constant(vec![pos + 1, d], cache.keys[li].clone())?;
            let values = g.constant(vec![pos + 1, d], cache.values[li].clone())?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hi in 0..cfg.n_heads {
                let qh = g.slice_cols(q, hi * dh, dh)?;
                let kh = g.slice_cols(keys, hi * dh, dh)?;
                let vh = g.slice_cols(values, hi * dh, dh)?;
                let scores = g.matmul_t(qh, kh)?;
                let scores = g.scale(scores, scale)?;
                let probs = g.softmax_rows(scores)?;
                heads.push(g.matmul(probs, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let attn = g.matmul_t(cat, lv.o)?;
            h = g.add(h, attn)?;
            let m = g.layer_norm(h, lv.ln2_gain, lv.ln2_bias, LAYER_NORM_EPS)?;
            let f = g.matmul(m, lv.mlp_in)?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, lv.mlp_out)?;
            h = g.add(h, f)?;
        }
        cache.len += 1;
        let out = g.layer_norm(h, self.final_gain, self.final_bias, LAYER_NORM_EPS)?;
        Ok(g.matmul(out, self.head)?)
    }

    fn run(
        &self,
        g: &mut Graph,
        tokens: &[u32],
        opts: ForwardOptions,
        mut cache: Option<&mut KvCache>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.weights.config;
        let t = tokens.len();
        if t == 0 {
            return Err(ModelError::Length { len: 0, max: cfg.max_seq_len });
        }
        if t > cfg.max_seq_len {
            return Err(ModelError::Length { len: t, max: cfg.max_seq_len });
        }
        let ids: Vec<usize> = tokens.iter().map(|&id| id as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.gather_rows(self.tok_emb, &ids)?;
        let pos = g.gather_rows(self.pos_emb, &positions)?;
        let mut h = g.add(tok, pos)?;

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut trace_layers = Vec::new();
        if let Some(c) = cache.as_deref_mut() {
            *c = KvCache { keys: Vec::with_capacity(cfg.n_layers), values: Vec::with_capacity(cfg.n_layers), len: t };
        }
        for (li, lv) in self.layers.iter().enumerate() {
            let a = g.layer_norm(h, lv.ln1_gain, lv.ln1_bias, LAYER_NORM_EPS)?;
            let q = self.project(g, a, li, Projection::Q)?;
            let k = self.project(g, a, li, Projection::K)?;
            let v = self.project(g, a, li, Projection::V)?;
            if let Some(c) = cache.as_deref_mut() {
                c.keys.push(g.value(k).to_vec());
                c.values.push(g.value(v).to_vec());
            }
            let mut heads = Vec::with_capacity(cfg.n_heads);
            let mut layer_trace = Vec::new();
            for hi in 0..cfg.n_heads {
                let qh = g.slice_cols(q, hi * dh, dh)?;
                let kh = g.slice_cols(k, hi * dh, dh)?;
                let vh = g.slice_cols(v, hi * dh, dh)?;
                let scores = g.matmul_t(qh, kh)?;
                let scores = g.scale(scores, scale)?;
                let probs = g.causal_softmax(scores)?;
                if opts.capture_trace {
                    layer_trace.push(g.value(probs).to_vec());
                }
                heads.push(g.matmul(probs, vh)?);
            }
            if opts.capture_trace {
                trace_layers.push(layer_trace);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let attn = g.matmul_t(cat, lv.o)?;
            h = g.add(h, attn)?;

            let m = g.layer_norm(h, lv.ln2_gain, lv.ln2_bias, LAYER_NORM_EPS)?;
            let f = g.matmul(m, lv.mlp_in)?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, lv.mlp_out)?;
            h = g.add(h, f)?;
        }
        if opts.last_position_only {
            h = g.slice_rows(h, t - 1, 1)?;
        }
        let out = g.layer_norm(h, self.final_gain, self.final_bias, LAYER_NORM_EPS)?;
        let logits = g.matmul(out, self.head)?;
        Ok(ForwardOutput {
            logits,
            trace: opts.capture_trace.then_some(AttentionTrace { seq_len: t, layers: trace_layers }),
        })
    }
}

/// Inference-only forward pass returning T×vocab logits.
pub fn forward(
    weights: &TransformerWeights,
    tokens: &[u32],
    adapters: &[LoraAdapter],
    capture_trace: bool,
) -> Result<(Tensor, Option<AttentionTrace>)> {
    let mut g = Graph::inference();
    let bound = BoundModel::bind(&mut g, weights, adapters)?;
    let out = bound.forward(&mut g, tokens, ForwardOptions { capture_trace, last_position_only: false })?;
    Ok((g.to_tensor(out.logits), out.trace))
}
