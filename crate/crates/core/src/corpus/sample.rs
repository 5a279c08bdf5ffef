use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, FeedbackRecord, FeedbackSource, Result};
use crate::io::derive_seed;

/// First `n` positions of a seeded Fisher–Yates shuffle of `0..len`.
/// Draws are taken as u64 so the result does not depend on pointer width.
fn partial_shuffle(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = rng.gen_range(i as u64..len as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

/// Uniform sample of `n` items without replacement, in draw order.
pub fn sample_subset<T: Clone>(ds: &[T], n: usize, seed: u64) -> Result<Vec<T>> {
    if n > ds.len() {
        return Err(CorpusError::Size(format!("cannot sample {n} items from a dataset of {}", ds.len())));
    }
    Ok(partial_shuffle(ds.len(), n, seed).into_iter().map(|i| ds[i].clone()).collect())
}

/// A seeded permutation of the whole dataset.
pub fn shuffled<T: Clone>(ds: &[T], seed: u64) -> Vec<T> {
    sample_subset(ds, ds.len(), seed).expect("n == len")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub total_n: usize,
    pub human_fraction: f64,
    pub seed: u64,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total_n == 0 {
            return Err(CorpusError::Validation("mix total_n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.human_fraction) {
            return Err(CorpusError::Validation(format!("human_fraction {} outside [0, 1]", self.human_fraction)));
        }
        Ok(())
    }
}

/// Round-half-up of `fraction · total`.
pub fn human_count(total: usize, fraction: f64) -> usize {
    (fraction * total as f64 + 0.5).floor() as usize
}

fn check_source(records: &[FeedbackRecord], want: FeedbackSource, side: &str) -> Result<()> {
    match records.iter().find(|r| r.source != want) {
        Some(r) => Err(CorpusError::Data(format!("{side} source contains a {} record for {}", r.source, r.example_id))),
        None => Ok(()),
    }
}

/// Combines a human and an AI feedback set at the requested proportion,
/// sampling each without replacement and shuffling the result.
pub fn mix(human: &[FeedbackRecord], ai: &[FeedbackRecord], spec: &MixSpec) -> Result<Vec<FeedbackRecord>> {
    spec.validate()?;
    let n_human = human_count(spec.total_n, spec.human_fraction);
    let n_ai = spec.total_n - n_human;
    for (side, have, need) in [("human", human.len(), n_human), ("AI", ai.len(), n_ai)] {
        if have < need {
            return Err(CorpusError::Size(format!("{side} source has {have} records but {need} are needed")));
        }
    }
    check_source(human, FeedbackSource::Human, "human")?;
    check_source(ai, FeedbackSource::Ai, "AI")?;
    let mut out = sample_subset(human, n_human, derive_seed(spec.seed, "mix.human"))?;
    out.extend(sample_subset(ai, n_ai, derive_seed(spec.seed, "mix.ai"))?);
    Ok(shuffled(&out, derive_seed(spec.seed, "mix.shuffle")))
}

/// Random partition into `k` parts whose sizes differ by at most one; the
/// first `len mod k` parts are the larger ones.
pub fn segment<T: Clone>(ds: &[T], k: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if k == 0 || k > ds.len() {
        return Err(CorpusError::Size(format!("cannot split {} items into {k} segments", ds.len())));
    }
    let order = shuffled(ds, seed);
    let base = ds.len() / k;
    let extra = ds.len() % k;
    let mut parts = Vec::with_capacity(k);
    let mut it = order.into_iter();
    for i in 0..k {
        let size = base + usize::from(i < extra);
        parts.push(it.by_ref().take(size).collect());
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_rule() {
        assert_eq!(human_count(932, 0.2), 186);
        assert_eq!(human_count(10, 0.25), 3);
        assert_eq!(human_count(10, 0.05), 1);
        assert_eq!(human_count(7, 0.0), 0);
        assert_eq!(human_count(7, 1.0), 7);
    }

    #[test]
    fn segment_sizes() {
        let ds: Vec<usize> = (0..932).collect();
        let sizes: Vec<usize> = segment(&ds, 6, 1).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![156, 156, 155, 155, 155, 155]);
        assert!(segment(&ds[..3], 4, 0).is_err());
        assert!(segment(&ds, 0, 0).is_err());
    }

    #[test]
    fn oversized_sample_is_an_error() {
        assert!(matches!(sample_subset(&[1, 2], 3, 0), Err(CorpusError::Size(_))));
    }
}
