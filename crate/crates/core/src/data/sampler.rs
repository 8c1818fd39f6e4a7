use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{PggaError, Result};

/// Identity-balanced batches of `P` identities × `K` samples.
#[derive(Debug, Clone)]
pub struct PkSampler {
    /// Sample indices of each identity.
    by_id: Vec<Vec<usize>>,
    p: usize,
    k: usize,
}

impl PkSampler {
    /// `labels[i]` is the identity of sample `i`.
    pub fn new(labels: &[usize], p: usize, k: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(PggaError::InvalidArgument(format!("P and K must be positive, got {p} and {k}")));
        }
        let n_ids = labels.iter().max().map_or(0, |m| m + 1);
        let mut by_id = vec![Vec::new(); n_ids];
        for (i, &l) in labels.iter().enumerate() {
            by_id[l].push(i);
        }
        by_id.retain(|v| v.len() >= k);
        if by_id.len() < p {
            return Err(PggaError::InvalidArgument(format!(
                "PK sampling needs {p} identities with ≥ {k} samples, found {}",
                by_id.len()
            )));
        }
        Ok(Self { by_id, p, k })
    }

    /// One epoch of batches. Each identity's samples are shuffled and cut
    /// into chunks of `K` (a short remainder is dropped); batches take one
    /// chunk from each of `P` distinct identities, preferring those with
    /// more chunks left, until fewer than `P` identities have any.
    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let mut chunks: Vec<Vec<Vec<usize>>> = self
            .by_id
            .iter()
            .map(|ids| {
                let mut v = ids.clone();
                v.shuffle(rng);
                v.chunks_exact(self.k).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            let mut avail: Vec<usize> = (0..chunks.len()).filter(|&i| !chunks[i].is_empty()).collect();
            if avail.len() < self.p {
                return batches;
            }
            avail.shuffle(rng);
            // identities with the most chunks left go first, so an epoch
            // uses up nearly every chunk
            avail.sort_by_key(|&i| std::cmp::Reverse(chunks[i].len()));
            let mut batch = Vec::with_capacity(self.p * self.k);
            for &i in &avail[..self.p] {
                batch.extend(chunks[i].pop().expect("non-empty"));
            }
            batches.push(batch);
        }
    }
}

/// One `P×K` batch drawn directly, without epoch bookkeeping.
pub fn pk_batch<R: Rng + ?Sized>(labels: &[usize], p: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let s = PkSampler::new(labels, p, k)?;
    let ids: Vec<&Vec<usize>> = s.by_id.choose_multiple(rng, p).collect();
    let mut out = Vec::with_capacity(p * k);
    for v in ids {
        out.extend(v.choose_multiple(rng, k).copied());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn labels(ids: usize, per: usize) -> Vec<usize> {
        (0..ids * per).map(|i| i / per).collect()
    }

    #[test]
    fn batch_structure() {
        let l = labels(8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = pk_batch(&l, 4, 4, &mut rng).unwrap();
        let mut counts = BTreeMap::new();
        for i in &b {
            *counts.entry(l[*i]).or_insert(0) += 1;
        }
        assert_eq!(b.len(), 16);
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&c| c == 4));
    }

    #[test]
    fn epoch_without_replacement() {
        let l = labels(8, 16);
        let s = PkSampler::new(&l, 4, 4).unwrap();
        let batches = s.epoch(&mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(batches.len(), 8);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 128);
    }

    #[test]
    fn insufficient_identities() {
        assert!(PkSampler::new(&labels(3, 8), 4, 4).is_err());
        assert!(PkSampler::new(&labels(8, 3), 4, 4).is_err());
    }
}
