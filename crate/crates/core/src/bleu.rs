//! Corpus-level BLEU with the same arithmetic as Moses' `multi-bleu.perl`
//! (single reference, no smoothing).

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::exec::Exec;

pub const MAX_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// Percentage in `[0, 100]`.
    pub bleu: f64,
    /// Modified n-gram precisions for n = 1..=4, as fractions.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn ratio(&self) -> f64 {
        if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        }
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions.map(|p| 100.0 * p);
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            self.ratio(),
            self.hyp_len,
            self.ref_len
        )
    }
}

/// Clipped n-gram match counts of one sentence pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SentenceStats {
    pub correct: [u64; MAX_ORDER],
    pub total: [u64; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl SentenceStats {
    pub fn compute<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Self {
        let mut stats = SentenceStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            if hyp.len() < n {
                break;
            }
            let ref_counts = ngram_counts(reference, n);
            let hyp_counts = ngram_counts(hyp, n);
            stats.total[n - 1] = (hyp.len() + 1 - n) as u64;
            stats.correct[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        stats
    }

    fn add(mut self, other: &SentenceStats) -> Self {
        for n in 0..MAX_ORDER {
            self.correct[n] += other.correct[n];
            self.total[n] += other.total[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
        self
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Score already-accumulated corpus statistics.
pub fn score(stats: &SentenceStats) -> BleuReport {
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        if stats.total[n] > 0 {
            precisions[n] = stats.correct[n] as f64 / stats.total[n] as f64;
        }
    }
    let (c, r) = (stats.hyp_len as f64, stats.ref_len as f64);
    let brevity_penalty = if stats.hyp_len == 0 {
        0.0
    } else if c < r {
        (1.0 - r / c).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    } else {
        0.0
    };
    BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len: stats.hyp_len,
        ref_len: stats.ref_len,
    }
}

/// Corpus BLEU over whitespace-tokenized lines.
pub fn corpus_bleu<S: AsRef<str> + Sync>(hypotheses: &[S], references: &[S]) -> Result<BleuReport> {
    corpus_bleu_with(hypotheses, references, Exec::default())
}

pub fn corpus_bleu_with<S: AsRef<str> + Sync>(
    hypotheses: &[S],
    references: &[S],
    exec: Exec,
) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::LineCountMismatch {
            hyp: hypotheses.len(),
            reference: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::Empty("BLEU corpus"));
    }
    let pairs: Vec<(&str, &str)> = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| (h.as_ref(), r.as_ref()))
        .collect();
    let per_sentence = exec.map(&pairs, |(h, r)| {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        SentenceStats::compute(&h, &r)
    });
    let total = per_sentence.iter().fold(SentenceStats::default(), SentenceStats::add);
    Ok(score(&total))
}
