//! Beam search with length normalization, greedy decoding and the exhaustive
//! reference search used to check both.
//!
//! Pruning keeps the `width` best expansions by cumulative log-probability.
//! Finished hypotheses are ranked by `logp / lp(len)` with
//! `lp(n) = ((5 + n) / 6)^alpha`, where `n` counts the EOS token.

use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::{log_softmax, Graph};
use crate::model::{DecoderSnapshot, EncodedSentence, PaddedBatch, Seq2Seq};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::derived_rng;
use crate::vocab::{TokenId, EOS, SOS};

/// A model that scores the next token given a decoding state.
pub trait StepScorer {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn start(&self) -> Result<Self::State>;

    /// Log-probabilities over the vocabulary after feeding each `(state, token)`
    /// pair, plus the successor states.
    fn step(&self, items: &[(&Self::State, TokenId)]) -> Result<Vec<(Vec<f64>, Self::State)>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: 10,
            alpha: 0.6,
            max_len: 100,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.max_len == 0 {
            return Err(Error::Config("beam width and max length must be at least 1".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("length penalty alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Ends with EOS iff the hypothesis stopped on its own.
    pub tokens: Vec<TokenId>,
    pub logp: f64,
    pub score: f64,
}

impl Hypothesis {
    fn new(tokens: Vec<TokenId>, logp: f64, alpha: f64) -> Self {
        let score = logp / length_penalty(tokens.len(), alpha);
        Hypothesis { tokens, logp, score }
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

/// Best-first order: higher score, then the lexicographically smaller tokens.
fn by_score(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Clone, Debug)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// Up to `width` finished hypotheses, best first.
    pub nbest: Vec<Hypothesis>,
}

struct Live<S> {
    tokens: Vec<TokenId>,
    logp: f64,
    state: S,
}

pub fn beam_search<M: StepScorer>(model: &M, cfg: &BeamConfig) -> Result<BeamOutput> {
    cfg.validate()?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        logp: 0.0,
        state: model.start()?,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let best_possible = length_penalty(cfg.max_len, cfg.alpha);

    while !live.is_empty() {
        let inputs: Vec<(&M::State, TokenId)> = live
            .iter()
            .map(|h| (&h.state, h.tokens.last().copied().unwrap_or(SOS)))
            .collect();
        let stepped = model.step(&inputs)?;

        let mut candidates: Vec<(f64, usize, TokenId)> = Vec::with_capacity(live.len() * model.vocab_size());
        for (i, (logps, _)) in stepped.iter().enumerate() {
            for (tok, &lp) in logps.iter().enumerate() {
                candidates.push((live[i].logp + lp, i, tok as TokenId));
            }
        }
        // Parents are kept in token order, so (parent, token) order is the
        // lexicographic order of the extended sequences.
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        candidates.truncate(cfg.width);

        let states: Vec<M::State> = stepped.into_iter().map(|(_, s)| s).collect();
        let mut next = Vec::with_capacity(candidates.len());
        for &(logp, parent, tok) in &candidates {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(tok);
            if tok == EOS || tokens.len() >= cfg.max_len {
                finished.push(Hypothesis::new(tokens, logp, cfg.alpha));
            } else {
                let state = states[parent].clone();
                next.push(Live { tokens, logp, state });
            }
        }
        next.sort_by(|a, b| a.tokens.cmp(&b.tokens));
        live = next;

        // Extending a live hypothesis only lowers its log-probability, and the
        // largest divisor it can reach is lp(max_len).
        if let Some(best) = finished.iter().map(|h| h.score).max_by(f64::total_cmp) {
            let bound = live
                .iter()
                .map(|h| h.logp / best_possible)
                .fold(f64::NEG_INFINITY, f64::max);
            if best > bound {
                break;
            }
        }
    }

    finished.sort_by(by_score);
    finished.truncate(cfg.width);
    let best = finished.first().cloned().ok_or(Error::Empty("beam search result"))?;
    Ok(BeamOutput { best, nbest: finished })
}

/// Argmax decoding; the lowest token id wins ties.
pub fn greedy<M: StepScorer>(model: &M, max_len: usize) -> Result<Hypothesis> {
    let mut state = model.start()?;
    let mut tokens = Vec::new();
    let mut logp = 0.0;
    while tokens.len() < max_len {
        let prev = tokens.last().copied().unwrap_or(SOS);
        let (logps, next) = model.step(&[(&state, prev)])?.pop().ok_or(Error::Empty("step output"))?;
        let tok = argmax(&logps);
        logp += logps[tok];
        tokens.push(tok as TokenId);
        state = next;
        if tok as TokenId == EOS {
            break;
        }
    }
    Ok(Hypothesis::new(tokens, logp, 0.0))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Every sequence the search space admits (stopping at EOS or at `max_len`),
/// ranked like [`beam_search`]'s final list. Exponential in `max_len`.
pub fn exhaustive_search<M: StepScorer>(model: &M, alpha: f64, max_len: usize) -> Result<Vec<Hypothesis>> {
    fn expand<M: StepScorer>(
        model: &M,
        state: &M::State,
        tokens: &mut Vec<TokenId>,
        logp: f64,
        alpha: f64,
        max_len: usize,
        out: &mut Vec<Hypothesis>,
    ) -> Result<()> {
        let prev = tokens.last().copied().unwrap_or(SOS);
        let (logps, next) = model.step(&[(state, prev)])?.pop().ok_or(Error::Empty("step output"))?;
        for (tok, lp) in logps.into_iter().enumerate() {
            tokens.push(tok as TokenId);
            if tok as TokenId == EOS || tokens.len() == max_len {
                out.push(Hypothesis::new(tokens.clone(), logp + lp, alpha));
            } else {
                expand(model, &next, tokens, logp + lp, alpha, max_len, out)?;
            }
            tokens.pop();
        }
        Ok(())
    }
    let mut out = Vec::new();
    expand(model, &model.start()?, &mut Vec::new(), 0.0, alpha, max_len, &mut out)?;
    out.sort_by(by_score);
    Ok(out)
}

/// Toy model whose next-token distribution is a fixed pseudo-random function
/// of the prefix. The state is the prefix itself.
#[derive(Clone, Debug)]
pub struct PrefixHashModel {
    pub vocab: usize,
    pub seed: u64,
    /// Logits are drawn from `U(-spread, spread)`.
    pub spread: f64,
}

impl PrefixHashModel {
    pub fn new(vocab: usize, seed: u64) -> Self {
        PrefixHashModel { vocab, seed, spread: 3.0 }
    }

    fn logps(&self, prefix: &[TokenId]) -> Vec<f64> {
        // Prefixes of at most ~12 tokens over V <= 16 map to distinct streams.
        let key = prefix.iter().fold(1u64, |acc, &t| acc.wrapping_mul(self.vocab as u64 + 1).wrapping_add(t as u64 + 1));
        let mut rng = derived_rng(self.seed, key);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-self.spread..self.spread)).collect();
        log_softmax(&logits)
    }
}

impl StepScorer for PrefixHashModel {
    type State = Vec<TokenId>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self) -> Result<Vec<TokenId>> {
        Ok(Vec::new())
    }

    fn step(&self, items: &[(&Vec<TokenId>, TokenId)]) -> Result<Vec<(Vec<f64>, Vec<TokenId>)>> {
        Ok(items
            .iter()
            .map(|(prefix, tok)| {
                // The first call receives SOS, which is not part of the prefix.
                let mut next = (*prefix).clone();
                if !(prefix.is_empty() && *tok == SOS) {
                    next.push(*tok);
                }
                (self.logps(&next), next)
            })
            .collect())
    }
}

/// A trained model paired with one encoded source sentence.
pub struct ModelScorer<'a, T: Real> {
    model: &'a Seq2Seq,
    params: &'a ParamStore<T>,
    encoded: EncodedSentence<T>,
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(model: &'a Seq2Seq, params: &'a ParamStore<T>, source: &[TokenId]) -> Result<Self> {
        Ok(ModelScorer {
            model,
            params,
            encoded: model.encode_sentence(params, source)?,
        })
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    type State = DecoderSnapshot<T>;

    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn start(&self) -> Result<Self::State> {
        self.model.start_snapshot(self.params, &self.encoded)
    }

    fn step(&self, items: &[(&Self::State, TokenId)]) -> Result<Vec<(Vec<f64>, Self::State)>> {
        self.model.step_snapshots(self.params, &self.encoded, items)
    }
}

/// How to pick output tokens when translating a corpus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Search {
    Greedy { max_len: usize },
    Beam(BeamConfig),
}

impl Search {
    pub fn max_len(&self) -> usize {
        match self {
            Search::Greedy { max_len } => *max_len,
            Search::Beam(cfg) => cfg.max_len,
        }
    }
}

/// Output length cap for a source of `src_len` tokens.
pub fn length_cap(max_len: usize, src_len: usize) -> usize {
    max_len.min(2 * src_len + 10)
}

/// Translate one sentence; returns the best hypothesis and the n-best list.
pub fn translate<T: Real>(
    model: &Seq2Seq,
    params: &ParamStore<T>,
    source: &[TokenId],
    search: Search,
) -> Result<BeamOutput> {
    let scorer = ModelScorer::new(model, params, source)?;
    let cap = length_cap(search.max_len(), source.len());
    match search {
        Search::Greedy { .. } => {
            let best = greedy(&scorer, cap)?;
            Ok(BeamOutput {
                nbest: vec![best.clone()],
                best,
            })
        }
        Search::Beam(cfg) => beam_search(&scorer, &BeamConfig { max_len: cap, ..cfg }),
    }
}

/// Translate sentences independently, in input order.
pub fn translate_corpus<T: Real, S: AsRef<[TokenId]> + Sync>(
    model: &Seq2Seq,
    params: &ParamStore<T>,
    sources: &[S],
    search: Search,
    exec: Exec,
) -> Result<Vec<BeamOutput>> {
    exec.map(sources, |s| translate(model, params, s.as_ref(), search))
        .into_iter()
        .collect()
}

/// Greedy decoding of a whole batch in one graph per step. Produces the same
/// tokens as per-sentence [`greedy`] through [`ModelScorer`].
pub fn greedy_batch<T: Real, S: AsRef<[TokenId]>>(
    model: &Seq2Seq,
    params: &ParamStore<T>,
    sources: &[S],
    max_len: usize,
) -> Result<Vec<Vec<TokenId>>> {
    let batch = PaddedBatch::new(sources)?;
    let mut g = Graph::inference(params);
    let enc = model.encode(&mut g, &batch, None)?;
    let mut state = model.initial_decoder_state(&mut g, &enc)?;
    let caps: Vec<usize> = batch.lens.iter().map(|&l| length_cap(max_len, l)).collect();
    let mut out: Vec<Vec<TokenId>> = vec![Vec::new(); batch.batch()];
    let mut done = vec![false; batch.batch()];
    let mut prev = vec![SOS as usize; batch.batch()];
    let vocab = model.config().vocab_size;
    for _ in 0..caps.iter().copied().max().unwrap_or(0) {
        let step = model.decode_step(&mut g, &prev, &state, &enc, None)?;
        let logits = g.value(step.logits);
        for r in 0..batch.batch() {
            if done[r] {
                continue;
            }
            let tok = argmax(&log_softmax(&logits[r * vocab..(r + 1) * vocab])) as TokenId;
            out[r].push(tok);
            prev[r] = tok as usize;
            done[r] = tok == EOS || out[r].len() >= caps[r];
        }
        if done.iter().all(|&d| d) {
            break;
        }
        state = step.state;
    }
    for row in &mut out {
        if row.last() == Some(&EOS) {
            row.pop();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_penalty_examples() {
        assert_eq!(length_penalty(17, 0.0), 1.0);
        assert_eq!(length_penalty(1, 0.6), 1.0);
        assert_eq!(length_penalty(1, 2.5), 1.0);
        assert!((length_penalty(25, 0.6) - 2.626527804403767).abs() < 1e-12);
    }

    /// V = 3 with EOS at id 3 is impossible, so use a hand-built table over
    /// {0, 1, 2, EOS} where only ids 1, 2 and EOS carry mass.
    struct Table;

    impl StepScorer for Table {
        type State = Vec<TokenId>;
        fn vocab_size(&self) -> usize {
            4
        }
        fn start(&self) -> Result<Vec<TokenId>> {
            Ok(Vec::new())
        }
        fn step(&self, items: &[(&Vec<TokenId>, TokenId)]) -> Result<Vec<(Vec<f64>, Vec<TokenId>)>> {
            Ok(items
                .iter()
                .map(|(p, t)| {
                    let mut next = (*p).clone();
                    if !(p.is_empty() && *t == SOS) {
                        next.push(*t);
                    }
                    // [unused, a, b, EOS]
                    let probs: [f64; 4] = match next.as_slice() {
                        [] => [0.0, 0.5, 0.1, 0.4],
                        [1] => [0.0, 0.3, 0.3, 0.4],
                        _ => [0.0, 0.1, 0.8, 0.1],
                    };
                    (probs.iter().map(|p| p.ln()).collect(), next)
                })
                .collect())
        }
    }

    #[test]
    fn hand_table_matches_enumeration() {
        for alpha in [0.0, 0.6, 1.0, 10.0] {
            let all = exhaustive_search(&Table, alpha, 2).unwrap();
            let got = beam_search(&Table, &BeamConfig { width: 16, alpha, max_len: 2 }).unwrap();
            assert_eq!(got.best, all[0], "alpha {alpha}");
        }
        // With no penalty EOS right away (0.4) beats every two-token path.
        let best = beam_search(&Table, &BeamConfig { width: 16, alpha: 0.0, max_len: 2 }).unwrap().best;
        assert_eq!(best.tokens, vec![EOS]);
        // A strong penalty favours the best two-token output, a then EOS (0.2).
        let best = beam_search(&Table, &BeamConfig { width: 16, alpha: 10.0, max_len: 2 }).unwrap().best;
        assert_eq!(best.tokens, vec![1, EOS]);
    }

    #[test]
    fn width_one_is_greedy() {
        for seed in 0..20 {
            let m = PrefixHashModel::new(6, seed);
            let g = greedy(&m, 7).unwrap();
            let b = beam_search(&m, &BeamConfig { width: 1, alpha: 0.6, max_len: 7 }).unwrap();
            assert_eq!(g.tokens, b.best.tokens);
            assert!((g.logp - b.best.logp).abs() < 1e-12);
        }
    }

    #[test]
    fn full_width_matches_exhaustive() {
        for seed in 0..5 {
            let m = PrefixHashModel::new(5, seed);
            for alpha in [0.0, 0.6, 1.0] {
                let all = exhaustive_search(&m, alpha, 4).unwrap();
                let b = beam_search(&m, &BeamConfig { width: 625, alpha, max_len: 4 }).unwrap();
                assert_eq!(b.best, all[0]);
            }
        }
    }

    #[test]
    fn alpha_zero_ranks_by_logp() {
        let m = PrefixHashModel::new(5, 9);
        let out = beam_search(&m, &BeamConfig { width: 8, alpha: 0.0, max_len: 5 }).unwrap();
        for w in out.nbest.windows(2) {
            assert!(w[0].logp >= w[1].logp);
        }
    }

    #[test]
    fn invalid_configs() {
        let m = PrefixHashModel::new(5, 1);
        assert!(beam_search(&m, &BeamConfig { width: 0, alpha: 0.6, max_len: 5 }).is_err());
        assert!(beam_search(&m, &BeamConfig { width: 2, alpha: -1.0, max_len: 5 }).is_err());
    }
}
