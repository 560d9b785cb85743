use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};

/// Validation share used by default (3%).
pub const DEFAULT_VAL_FRACTION: f64 = 0.03;

/// Seeded shuffle, then the first `round(fraction·n)` items go to validation.
pub fn split_train_val<T>(items: Vec<T>, fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    ensure!(
        (0.0..1.0).contains(&fraction),
        "validation fraction {fraction} outside [0, 1)"
    );
    let n = items.len();
    let n_val = ((fraction * n as f64) + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("each index drawn once");
    let val: Vec<T> = order[..n_val].iter().map(|&i| take(i)).collect();
    let train: Vec<T> = order[n_val..].iter().map(|&i| take(i)).collect();
    Ok((train, val))
}

/// Fixed-length training sequences cut from the concatenated corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedDataset {
    msl: usize,
    tokens: Vec<u32>,
    /// Index of the document holding the first token of each sequence.
    first_doc: Vec<usize>,
}

impl PackedDataset {
    pub fn from_parts(msl: usize, tokens: Vec<u32>, first_doc: Vec<usize>) -> Result<Self> {
        ensure!(msl >= 2, "sequence length {msl} below 2");
        ensure!(
            tokens.len() == msl * first_doc.len(),
            "{} tokens cannot form {} sequences of {msl}",
            tokens.len(),
            first_doc.len()
        );
        Ok(PackedDataset {
            msl,
            tokens,
            first_doc,
        })
    }

    pub fn msl(&self) -> usize {
        self.msl
    }

    pub fn len(&self) -> usize {
        self.first_doc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_doc.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.msl..(i + 1) * self.msl]
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks(self.msl)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn first_doc(&self) -> &[usize] {
        &self.first_doc
    }

    /// Stream offset of sequence `i`.
    pub fn offset(&self, i: usize) -> usize {
        i * self.msl
    }
}

/// Concatenates each document followed by `eod`, then cuts the stream into
/// `msl`-token sequences. A trailing partial sequence is dropped.
pub fn pack_sequences(docs: &[Vec<u32>], msl: usize, eod: u32) -> Result<PackedDataset> {
    ensure!(msl >= 2, "sequence length {msl} below 2");
    let mut stream = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    let mut owner = Vec::with_capacity(stream.capacity());
    for (i, d) in docs.iter().enumerate() {
        stream.extend_from_slice(d);
        stream.push(eod);
        owner.extend(std::iter::repeat_n(i, d.len() + 1));
    }
    let n = stream.len() / msl;
    stream.truncate(n * msl);
    let first_doc = (0..n).map(|s| owner[s * msl]).collect();
    PackedDataset::from_parts(msl, stream, first_doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_chunking() {
        const E: u32 = 99;
        let p = pack_sequences(&[vec![1, 2, 3], vec![4, 5, 6, 7]], 4, E).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.sequence(0), &[1, 2, 3, E]);
        assert_eq!(p.sequence(1), &[4, 5, 6, 7]);
        assert_eq!(p.first_doc(), &[0, 1]);

        assert!(pack_sequences(&[vec![1]], 4, E).unwrap().is_empty());
        assert!(pack_sequences(&[vec![1]], 1, E).is_err());
    }

    #[test]
    fn split_sizes() {
        let docs: Vec<u32> = (0..100).collect();
        let (train, val) = split_train_val(docs.clone(), 0.03, 1).unwrap();
        assert_eq!((train.len(), val.len()), (97, 3));
        let mut all: Vec<u32> = train.iter().chain(&val).copied().collect();
        all.sort();
        assert_eq!(all, docs);

        let (train, val) = split_train_val(docs.clone(), 0.0, 1).unwrap();
        assert_eq!((train.len(), val.len()), (100, 0));
        assert!(split_train_val(docs.clone(), 1.0, 1).is_err());
        assert_eq!(
            split_train_val(docs.clone(), 0.1, 5).unwrap(),
            split_train_val(docs, 0.1, 5).unwrap()
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn packing_conserves_order_and_length(
                docs in prop::collection::vec(prop::collection::vec(0u32..50, 0..20), 0..12),
                msl in 2usize..9,
            ) {
                let p = pack_sequences(&docs, msl, 1000).unwrap();
                let stream: Vec<u32> = docs.iter().flat_map(|d| d.iter().copied().chain([1000])).collect();
                prop_assert_eq!(p.tokens().len(), msl * (stream.len() / msl));
                prop_assert_eq!(p.tokens(), &stream[..p.tokens().len()]);
                prop_assert!(p.sequences().all(|s| s.len() == msl));
            }
        }
    }
}
