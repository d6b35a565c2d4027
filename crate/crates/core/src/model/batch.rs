use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelError;
use crate::tokenizer::{BOS, EOS, PAD};

/// One training pair before special tokens are added.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    /// Encoder prefix followed by source subwords.
    pub src: Vec<u32>,
    /// Decoder prefix followed by target subwords.
    pub tgt: Vec<u32>,
}

impl Example {
    pub fn src_len(&self) -> usize {
        self.src.len() + 1
    }

    pub fn tgt_len(&self) -> usize {
        self.tgt.len() + 1
    }
}

/// PAD-filled id matrices, row-major `[size, len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src_ids: Vec<u32>,
    pub tgt_in_ids: Vec<u32>,
    pub tgt_out_ids: Vec<u32>,
}

impl Batch {
    /// `src + EOS`, `BOS + tgt` and `tgt + EOS`, padded to the longest row.
    pub fn from_examples(examples: &[&Example]) -> Result<Self, ModelError> {
        let seqs: Vec<(Vec<u32>, Vec<u32>)> = examples
            .iter()
            .map(|e| {
                let mut src = e.src.clone();
                src.push(EOS);
                let mut tgt_in = vec![BOS];
                tgt_in.extend_from_slice(&e.tgt);
                (src, tgt_in)
            })
            .collect();
        Self::from_sequences(&seqs)
    }

    /// Builds a batch from complete encoder inputs and decoder inputs; the
    /// decoder targets are the inputs shifted left with EOS appended.
    pub fn from_sequences(seqs: &[(Vec<u32>, Vec<u32>)]) -> Result<Self, ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let src_len = seqs.iter().map(|s| s.0.len()).max().unwrap_or(0);
        let tgt_len = seqs.iter().map(|s| s.1.len()).max().unwrap_or(0);
        if src_len == 0 || tgt_len == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let mut b = Batch {
            size: seqs.len(),
            src_len,
            tgt_len,
            src_ids: vec![PAD; seqs.len() * src_len],
            tgt_in_ids: vec![PAD; seqs.len() * tgt_len],
            tgt_out_ids: vec![PAD; seqs.len() * tgt_len],
        };
        for (i, (src, tgt_in)) in seqs.iter().enumerate() {
            b.src_ids[i * src_len..i * src_len + src.len()].copy_from_slice(src);
            b.tgt_in_ids[i * tgt_len..i * tgt_len + tgt_in.len()].copy_from_slice(tgt_in);
            let out = &mut b.tgt_out_ids[i * tgt_len..];
            out[..tgt_in.len() - 1].copy_from_slice(&tgt_in[1..]);
            out[tgt_in.len() - 1] = EOS;
        }
        Ok(b)
    }

    /// `true` at padded source positions.
    pub fn src_padding(&self) -> Vec<bool> {
        self.src_ids.iter().map(|&t| t == PAD).collect()
    }

    pub fn tgt_padding(&self) -> Vec<bool> {
        self.tgt_in_ids.iter().map(|&t| t == PAD).collect()
    }

    /// Same batch with extra PAD columns appended to both sides.
    pub fn padded(&self, extra_src: usize, extra_tgt: usize) -> Self {
        let widen = |ids: &[u32], len: usize, extra: usize| -> Vec<u32> {
            ids.chunks(len).flat_map(|row| row.iter().copied().chain(std::iter::repeat_n(PAD, extra))).collect()
        };
        Batch {
            size: self.size,
            src_len: self.src_len + extra_src,
            tgt_len: self.tgt_len + extra_tgt,
            src_ids: widen(&self.src_ids, self.src_len, extra_src),
            tgt_in_ids: widen(&self.tgt_in_ids, self.tgt_len, extra_tgt),
            tgt_out_ids: widen(&self.tgt_out_ids, self.tgt_len, extra_tgt),
        }
    }

    /// Number of non-PAD target positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt_out_ids.iter().filter(|&&t| t != PAD).count()
    }
}

/// Groups example indices into batches whose padded size stays within
/// `budget` tokens on each side.
///
/// Examples are sorted by length (ties broken by a seeded shuffle), packed
/// greedily, and the batch order is shuffled with the same seed.
pub fn token_budget_batches(examples: &[Example], budget: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (examples[i].src_len(), examples[i].tgt_len()));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let (mut max_src, mut max_tgt) = (0, 0);
    for i in order {
        let (s, t) = (max_src.max(examples[i].src_len()), max_tgt.max(examples[i].tgt_len()));
        let n = current.len() + 1;
        if !current.is_empty() && (n * s > budget || n * t > budget) {
            batches.push(std::mem::take(&mut current));
            (max_src, max_tgt) = (examples[i].src_len(), examples[i].tgt_len());
        } else {
            (max_src, max_tgt) = (s, t);
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(s: usize, t: usize) -> Example {
        Example { src: (0..s as u32).map(|i| 10 + i).collect(), tgt: (0..t as u32).map(|i| 20 + i).collect() }
    }

    #[test]
    fn special_tokens_and_shift() {
        let a = ex(2, 3);
        let b = Batch::from_examples(&[&a]).unwrap();
        assert_eq!(b.src_ids, vec![10, 11, EOS]);
        assert_eq!(b.tgt_in_ids, vec![BOS, 20, 21, 22]);
        assert_eq!(b.tgt_out_ids, vec![20, 21, 22, EOS]);
    }

    #[test]
    fn padding_fills_short_rows() {
        let (a, c) = (ex(1, 1), ex(3, 2));
        let b = Batch::from_examples(&[&a, &c]).unwrap();
        assert_eq!((b.src_len, b.tgt_len), (4, 3));
        assert_eq!(&b.src_ids[..4], &[10, EOS, PAD, PAD]);
        assert_eq!(&b.tgt_in_ids[..3], &[BOS, 20, PAD]);
        assert_eq!(&b.tgt_out_ids[..3], &[20, EOS, PAD]);
        assert_eq!(b.target_tokens(), 2 + 3);
        let p = b.padded(2, 1);
        assert_eq!(p.src_ids.len(), 2 * 6);
        assert_eq!(p.target_tokens(), b.target_tokens());
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(Batch::from_examples(&[]).is_err());
    }

    proptest! {
        #[test]
        fn budget_batches_partition_and_respect_budget(
            lens in prop::collection::vec((1usize..20, 1usize..20), 1..80),
            budget in 20usize..200,
            seed in 0u64..50,
        ) {
            let examples: Vec<Example> = lens.iter().map(|&(s, t)| ex(s, t)).collect();
            let batches = token_budget_batches(&examples, budget, seed);
            let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
            seen.sort();
            prop_assert_eq!(seen, (0..examples.len()).collect::<Vec<_>>());
            for b in &batches {
                prop_assert!(!b.is_empty());
                if b.len() > 1 {
                    let s = b.iter().map(|&i| examples[i].src_len()).max().unwrap();
                    let t = b.iter().map(|&i| examples[i].tgt_len()).max().unwrap();
                    prop_assert!(b.len() * s <= budget && b.len() * t <= budget);
                }
            }
            prop_assert_eq!(batches.clone(), token_budget_batches(&examples, budget, seed));
        }
    }
}
