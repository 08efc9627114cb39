//! Character-level corpus handling and masked-LM batch construction.
//!
//! The vocabulary is the sorted set of characters in the corpus plus one
//! mask token appended at the end. The corpus splits 90/10 into train and
//! validation by position, fixed for a given file. Batches are pure
//! functions of `(seed, split, index)`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::KeyedRng;

const DATA_STREAM: u64 = 0x64617461;

/// Batch source split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    fn key(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
        }
    }
}

/// Character vocabulary with a trailing mask token.
#[derive(Debug, Clone)]
pub struct Vocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocab {
    fn from_text(text: &str) -> Self {
        let mut chars: Vec<char> = {
            let mut set: Vec<char> = text.chars().collect();
            set.sort_unstable();
            set.dedup();
            set
        };
        chars.shrink_to_fit();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Vocab { chars, index }
    }

    /// Total size including the mask token.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    /// The mask token id (one past the real characters).
    pub fn mask_id(&self) -> usize {
        self.chars.len()
    }

    pub fn encode(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn decode(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }
}

/// Tokenized corpus with its fixed split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Config("corpus is empty".into()));
        }
        let vocab = Vocab::from_text(text);
        let ids: Vec<usize> = text
            .chars()
            .map(|c| vocab.encode(c).expect("vocab covers the corpus"))
            .collect();
        let split_at = ids.len() * 9 / 10;
        let (train, validation) = ids.split_at(split_at);
        Ok(Corpus {
            vocab,
            train: train.to_vec(),
            validation: validation.to_vec(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read corpus {path:?}: {e}")))?;
        Corpus::from_text(&text)
    }

    fn split_ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }
}

/// One masked-LM batch. `labels`/`mask` are flattened `batch*seq`, matching
/// the logits layout of the model forward pass.
#[derive(Debug, Clone)]
pub struct MlmBatch {
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl MlmBatch {
    pub fn masked_positions(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Build batch `index` of a split: windows sampled uniformly, then the
/// 80/10/10 mask/random/keep convention applied at `mask_prob` per position.
///
/// Deterministic in `(seed, split, index)` and independent of any other
/// draw in the program.
pub fn mlm_batch(
    corpus: &Corpus,
    batch_size: usize,
    seq: usize,
    mask_prob: f64,
    seed: u64,
    split: Split,
    index: u64,
) -> Result<MlmBatch> {
    let ids = corpus.split_ids(split);
    if ids.len() < seq {
        return Err(Error::Config(format!(
            "corpus split has {} tokens, shorter than one {seq}-token sequence",
            ids.len()
        )));
    }
    if !(0.0..1.0).contains(&mask_prob) {
        return Err(Error::Config(format!(
            "mask probability must be in [0, 1), got {mask_prob}"
        )));
    }
    let mut rng = KeyedRng::new(seed, &[DATA_STREAM, split.key(), index]);
    let mask_id = corpus.vocab.mask_id();
    let real_vocab = corpus.vocab.size() - 1;

    let mut tokens = Vec::with_capacity(batch_size);
    let mut labels = vec![0usize; batch_size * seq];
    let mut mask = vec![false; batch_size * seq];
    for b in 0..batch_size {
        let start = rng.below(ids.len() - seq + 1);
        let mut row = ids[start..start + seq].to_vec();
        for (s, slot) in row.iter_mut().enumerate() {
            let flat = b * seq + s;
            labels[flat] = *slot;
            if rng.bernoulli(mask_prob) {
                mask[flat] = true;
                let roll = rng.uniform_f64();
                if roll < 0.8 {
                    *slot = mask_id;
                } else if roll < 0.9 {
                    *slot = rng.below(real_vocab);
                } // else: keep the original token
            }
        }
        tokens.push(row);
    }
    Ok(MlmBatch {
        tokens,
        labels,
        mask,
    })
}
