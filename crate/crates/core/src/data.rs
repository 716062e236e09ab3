//! Parallel corpora, length-bucketed batching and the synthetic copy and
//! reversal tasks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::derived_rng;
use crate::vocab::{TokenId, Vocabulary, RESERVED};

/// Sentences longer than this many tokens are dropped at ingestion.
pub const DEFAULT_MAX_SENTENCE_LEN: usize = 50;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub sources: Vec<Vec<TokenId>>,
    pub targets: Vec<Vec<TokenId>>,
}

impl ParallelCorpus {
    pub fn new(sources: Vec<Vec<TokenId>>, targets: Vec<Vec<TokenId>>) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(Error::LineCountMismatch {
                hyp: sources.len(),
                reference: targets.len(),
            });
        }
        Ok(ParallelCorpus { sources, targets })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Read line-aligned token files. Pairs with an empty side or a side
    /// longer than `max_len` are skipped; returns the corpus and the number
    /// of skipped pairs.
    pub fn read(source: &Path, target: &Path, vocab: &Vocabulary, max_len: usize) -> Result<(Self, usize)> {
        let src = read_lines(source)?;
        let tgt = read_lines(target)?;
        if src.len() != tgt.len() {
            return Err(Error::LineCountMismatch {
                hyp: src.len(),
                reference: tgt.len(),
            });
        }
        let mut corpus = ParallelCorpus::default();
        let mut skipped = 0;
        for (s, t) in src.iter().zip(&tgt) {
            let s = vocab.encode(s.split_whitespace());
            let t = vocab.encode(t.split_whitespace());
            if s.is_empty() || t.is_empty() || s.len() > max_len || t.len() > max_len {
                skipped += 1;
                continue;
            }
            corpus.sources.push(s);
            corpus.targets.push(t);
        }
        Ok((corpus, skipped))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        ParallelCorpus {
            sources: indices.iter().map(|&i| self.sources[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }

    /// Batches of corpus indices for one epoch. Pairs of similar length share
    /// a batch; both the grouping and the batch order depend only on
    /// `(seed, epoch)`. The last batch may be smaller.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let batch_size = batch_size.max(1);
        let mut rng = derived_rng(seed, epoch);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        // Stable sort keeps the shuffled order within each length bucket.
        order.sort_by_key(|&i| (self.sources[i].len(), self.targets[i].len()));
        let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        batches.shuffle(&mut rng);
        batches
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?.lines().map(str::to_string).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticTask {
    Copy,
    Reverse,
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Reverse => "reverse",
        })
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SyntheticTask::Copy),
            "reverse" => Ok(SyntheticTask::Reverse),
            other => Err(Error::Config(format!("unknown task `{other}` (expected copy or reverse)"))),
        }
    }
}

/// Random sentences over the non-reserved ids of a `vocab_size` vocabulary
/// with lengths in `min_len..=max_len`, paired with their copy or reversal.
pub fn synthetic_corpus(
    task: SyntheticTask,
    pairs: usize,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    if vocab_size <= RESERVED {
        return Err(Error::Config(format!("vocab size must exceed {RESERVED}")));
    }
    if min_len == 0 || min_len > max_len {
        return Err(Error::Config(format!("bad length range {min_len}..={max_len}")));
    }
    let mut rng = derived_rng(seed, 0x5eed);
    let mut corpus = ParallelCorpus::default();
    for _ in 0..pairs {
        let len = rng.gen_range(min_len..=max_len);
        let src: Vec<TokenId> = (0..len)
            .map(|_| rng.gen_range(RESERVED as TokenId..vocab_size as TokenId))
            .collect();
        let tgt = match task {
            SyntheticTask::Copy => src.clone(),
            SyntheticTask::Reverse => src.iter().rev().copied().collect(),
        };
        corpus.sources.push(src);
        corpus.targets.push(tgt);
    }
    Ok(corpus)
}

/// Vocabulary whose token for id `i` is `w{i}`.
pub fn synthetic_vocabulary(vocab_size: usize) -> Vocabulary {
    Vocabulary::new((RESERVED..vocab_size).map(|i| format!("w{i}")))
}
