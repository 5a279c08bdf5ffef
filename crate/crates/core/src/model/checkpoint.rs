//! Versioned binary container for model and adapter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "LAFFICKP"
//! version      u32      1
//! kind         u8       0 = model, 1 = adapters
//! config       n_layers, n_heads, d_model, d_ff, vocab_size, max_seq_len (u32 each), init_seed (u64)
//! meta_count   u32, then per entry: key (u32 len + UTF-8), value (u32 len + UTF-8)
//! tensor_count u32, then per tensor: name (u32 len + UTF-8), ndim u32, dims (u32 each),
//!              data as raw f32 bits
//! ```

use std::path::Path;

use super::{ModelConfig, ModelError, Result, TransformerWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LAFFICKP";
pub const FORMAT_VERSION: u32 = 1;
const MAX_NDIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    Model,
    Adapters,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub config: ModelConfig,
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| bad(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| bad(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| bad(format!("{what} is not UTF-8")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(match self.kind {
            ContainerKind::Model => 0,
            ContainerKind::Adapters => 1,
        });
        let c = &self.config;
        for v in [c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_seq_len] {
            put_u32(&mut out, v)?;
        }
        out.extend_from_slice(&c.init_seed.to_le_bytes());
        put_u32(&mut out, self.metadata.len())?;
        for (k, v) in &self.metadata {
            put_str(&mut out, k)?;
            put_str(&mut out, v)?;
        }
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a container. Never panics or over-allocates on hostile input.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(bad("bad magic; not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION as usize {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let kind = match r.u8("kind")? {
            0 => ContainerKind::Model,
            1 => ContainerKind::Adapters,
            k => return Err(bad(format!("unknown container kind {k}"))),
        };
        let config = ModelConfig {
            n_layers: r.u32("n_layers")?,
            n_heads: r.u32("n_heads")?,
            d_model: r.u32("d_model")?,
            d_ff: r.u32("d_ff")?,
            vocab_size: r.u32("vocab_size")?,
            max_seq_len: r.u32("max_seq_len")?,
            init_seed: r.u64("init_seed")?,
        };
        let meta_count = r.u32("metadata count")?;
        // each entry needs at least 8 bytes of length prefixes
        if meta_count > r.remaining() / 8 {
            return Err(bad("metadata count exceeds file size"));
        }
        let mut metadata = Vec::with_capacity(meta_count);
        for _ in 0..meta_count {
            let k = r.string("metadata key")?;
            let v = r.string("metadata value")?;
            metadata.push((k, v));
        }
        let tensor_count = r.u32("tensor count")?;
        if tensor_count > r.remaining() / 8 {
            return Err(bad("tensor count exceeds file size"));
        }
        let mut tensors = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let name = r.string("tensor name")?;
            let ndim = r.u32("ndim")?;
            if ndim > MAX_NDIM {
                return Err(bad(format!("tensor {name:?} has {ndim} dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| bad(format!("tensor {name:?} data exceeds file size")))?;
            let raw = r.take(numel * 4, "tensor data")?;
            let data =
                raw.chunks_exact(4).map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
            let t = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(bad(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { kind, config, metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        crate::io::write_atomic(path, &bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes)
    }
}

impl TransformerWeights {
    pub fn to_container(&self) -> Container {
        Container {
            kind: ContainerKind::Model,
            config: self.config.clone(),
            metadata: Vec::new(),
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(n, t)| {
                    let mut t = t.clone();
                    t.set_requires_grad(false);
                    (n, t)
                })
                .collect(),
        }
    }

    /// Rebuilds weights from a model container, checking every name and shape.
    /// Loaded tensors are trainable.
    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != ContainerKind::Model {
            return Err(bad("container holds adapters, not model weights"));
        }
        c.config.validate()?;
        // Ten tensors per layer plus five shared ones; checked before building
        // the shape list, whose length a hostile n_layers controls.
        let want = c.config.n_layers.checked_mul(10).and_then(|n| n.checked_add(5));
        if want != Some(c.tensors.len()) {
            return Err(bad(format!("{} layers do not match {} tensors", c.config.n_layers, c.tensors.len())));
        }
        let expected = Self::expected_shapes(&c.config);
        // Check every tensor before allocating the model, so a small file that
        // claims a huge config fails cheaply.
        for ((name, shape), (got_name, t)) in expected.iter().zip(&c.tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(bad(format!("expected tensor {name} {shape:?}, found {got_name} {:?}", t.shape())));
            }
            t.ensure_finite("checkpoint")?;
        }
        let mut weights = super::init_model(&ModelConfig { init_seed: c.config.init_seed, ..c.config.clone() })?;
        let mut slots = weights.named_tensors_mut();
        for ((_, t), (_, slot)) in c.tensors.iter().zip(slots.iter_mut()) {
            slot.data_mut().copy_from_slice(t.data());
        }
        drop(slots);
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Preset};

    #[test]
    fn model_round_trip_is_bit_exact() {
        let w = init_model(&Preset::Nano.config(9)).unwrap();
        let bytes = w.to_container().encode().unwrap();
        let back = TransformerWeights::from_container(Container::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_container().encode().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let w = init_model(&Preset::Nano.config(1)).unwrap();
        let bytes = w.to_container().encode().unwrap();
        assert!(Container::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Container::decode(&bad_magic).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::decode(&extra).is_err());
        let mut bad_version = bytes;
        bad_version[8] = 2;
        assert!(Container::decode(&bad_version).is_err());
    }

    #[test]
    fn huge_declared_sizes_fail_cleanly() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&[0u8; 32]);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(Container::decode(&bytes).is_err());
    }

    #[test]
    fn huge_config_with_few_tensors_fails_without_allocating() {
        let w = init_model(&Preset::Nano.config(1)).unwrap();
        let mut c = w.to_container();
        c.config.n_layers = usize::MAX / 2;
        c.config.vocab_size = 1 << 40;
        assert!(TransformerWeights::from_container(c.clone()).is_err());
        c.config.n_layers = 2;
        assert!(TransformerWeights::from_container(c).is_err());
    }
}
