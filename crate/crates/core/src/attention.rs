//! Head-averaged attention maps and their CSV / plain-PGM export.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::lora::LoraAdapter;
use crate::model::{self, tokenizer, AttentionTrace, ModelError, TransformerWeights};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("index error: {0}")]
    Index(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

#[derive(Clone, Debug, PartialEq)]
pub struct MeanAttention {
    pub tokens: Vec<String>,
    /// T×T, row-major.
    pub matrix: Vec<f64>,
}

impl MeanAttention {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.matrix[row * self.len() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let t = self.len();
        &self.matrix[row * t..(row + 1) * t]
    }
}

/// Element-wise mean over the heads of one layer (default: the last).
/// Each element's head values are summed in ascending order, so the result
/// does not depend on head order.
pub fn mean_attention(trace: &AttentionTrace, layer: Option<usize>, labels: Vec<String>) -> Result<MeanAttention> {
    let n_layers = trace.n_layers();
    if n_layers == 0 {
        return Err(AttentionError::Index("trace has no layers".into()));
    }
    let layer = layer.unwrap_or(n_layers - 1);
    let heads = trace
        .layers
        .get(layer)
        .ok_or_else(|| AttentionError::Index(format!("layer {layer} out of range (trace has {n_layers})")))?;
    let t = trace.seq_len;
    if labels.len() != t {
        return Err(AttentionError::Index(format!("{} token labels for a sequence of {t}", labels.len())));
    }
    if heads.is_empty() || heads.iter().any(|h| h.len() != t * t) {
        return Err(AttentionError::Format(format!("layer {layer} heads are not {t}x{t}")));
    }
    let n = heads.len() as f64;
    let mut vals = Vec::with_capacity(heads.len());
    let matrix = (0..t * t)
        .map(|i| {
            vals.clear();
            vals.extend(heads.iter().map(|h| f64::from(h[i])));
            vals.sort_by(f64::total_cmp);
            vals.iter().sum::<f64>() / n
        })
        .collect();
    Ok(MeanAttention { tokens: labels, matrix })
}

pub fn token_labels(tokens: &[u32]) -> Vec<String> {
    tokens.iter().map(|&t| tokenizer::token_label(t)).collect()
}

/// Runs `prompt` (BOS-prefixed) through each model and averages the heads
/// of `layer` (default last). Output order follows `models`.
pub fn compare_runs(
    prompt: &str,
    models: &[(&str, &TransformerWeights, &[LoraAdapter])],
    layer: Option<usize>,
) -> Result<Vec<(String, MeanAttention)>> {
    let mut tokens = vec![tokenizer::BOS];
    tokens.extend(tokenizer::tokenize(prompt));
    let mut out = Vec::with_capacity(models.len());
    for (name, weights, adapters) in models {
        let (_, trace) = model::forward(weights, &tokens, adapters, true)?;
        let trace = trace.expect("trace requested");
        out.push((name.to_string(), mean_attention(&trace, layer, token_labels(&tokens))?));
    }
    Ok(out)
}

pub fn to_csv(m: &MeanAttention) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&m.tokens)?;
    for r in 0..m.len() {
        w.write_record(m.row(r).iter().map(|v| format!("{v:.6}")))?;
    }
    let bytes = w.into_inner().map_err(|e| AttentionError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| AttentionError::Format(e.to_string()))
}

pub fn parse_csv(text: &str) -> Result<MeanAttention> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let tokens: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let t = tokens.len();
    let mut matrix = Vec::with_capacity(t * t);
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter() {
            matrix.push(field.parse::<f64>().map_err(|e| AttentionError::Format(format!("row {}: {e}", rows + 1)))?);
        }
        rows += 1;
    }
    if rows != t || matrix.len() != t * t {
        return Err(AttentionError::Format(format!("expected a {t}x{t} matrix, found {rows} rows")));
    }
    Ok(MeanAttention { tokens, matrix })
}

/// Gray level for a value in [0, 1]: the value is first fixed to six
/// decimals (the CSV precision), then `255·v` is rounded half up in integer
/// arithmetic, so exact decimal inputs such as 0.3 map to 77.
pub fn gray_level(v: f64) -> u8 {
    let micro = (v.clamp(0.0, 1.0) * 1e6).round() as u64;
    ((micro * 255 + 500_000) / 1_000_000) as u8
}

pub fn to_pgm(m: &MeanAttention) -> String {
    let t = m.len();
    let mut out = format!("P2\n{t} {t}\n255\n");
    for r in 0..t {
        let row: Vec<String> = m.row(r).iter().map(|&v| gray_level(v).to_string()).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

/// Parses a plain (P2) PGM into (width, height, max value, pixels).
pub fn parse_pgm(text: &str) -> Result<(usize, usize, u32, Vec<u32>)> {
    let bad = |m: &str| AttentionError::Format(format!("PGM: {m}"));
    let mut words = text.lines().map(|l| l.split('#').next().unwrap_or("")).flat_map(str::split_whitespace);
    if words.next() != Some("P2") {
        return Err(bad("missing P2 magic"));
    }
    let mut num = |what: &str| -> Result<u64> {
        words
            .next()
            .ok_or_else(|| bad(&format!("missing {what}")))?
            .parse::<u64>()
            .map_err(|_| bad(&format!("bad {what}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("max value")?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("max value out of range"));
    }
    let count = w.checked_mul(h).filter(|&c| c <= text.len() as u64).ok_or_else(|| bad("dimensions exceed data"))?;
    let mut px = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let v = num("pixel")?;
        if v > maxval {
            return Err(bad("pixel exceeds max value"));
        }
        px.push(v as u32);
    }
    if words.next().is_some() {
        return Err(bad("trailing data"));
    }
    Ok((w as usize, h as usize, maxval as u32, px))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Pgm,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "pgm" => Ok(Self::Pgm),
            _ => Err(format!("unknown export format {s:?} (expected csv or pgm)")),
        }
    }
}

pub fn export(m: &MeanAttention, path: &Path, format: ExportFormat) -> Result<()> {
    let text = match format {
        ExportFormat::Csv => to_csv(m)?,
        ExportFormat::Pgm => to_pgm(m),
    };
    crate::io::write_atomic(path, text.as_bytes())?;
    Ok(())
}
