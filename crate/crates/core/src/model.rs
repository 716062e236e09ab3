//! Encoder-attention-decoder translation model.
//!
//! The model struct only holds parameter handles; values live in a
//! [`ParamStore`] so that training can mutate them between forward passes.
//!
//! Decoder variants by attention type:
//! * `mul` / `add`: zero initial state, input `[emb(y); c_prev]`, output
//!   `W [s; c] + b`.
//! * `none-state`: initial state of every decoder layer set from the final
//!   encoder state (through a learned linear map when widths differ), input
//!   `emb(y)`, output `W s + b`.
//! * `none-input`: zero initial state, input `[emb(y); final encoder state]`,
//!   output `W s + b`.

use crate::cells::{CellState, Stack, StackSpec};
use crate::config::{AttentionType, Direction, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{Init, SeededRng, Tensor};
use crate::vocab::{TokenId, EOS, PAD, SOS};

/// Padded, batch-major token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    /// `batch * max_len` ids, row-major, padded with [`PAD`].
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub max_len: usize,
}

impl PaddedBatch {
    pub fn new<S: AsRef<[TokenId]>>(rows: &[S]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let lens: Vec<usize> = rows.iter().map(|r| r.as_ref().len()).collect();
        if lens.iter().any(|&l| l == 0) {
            return Err(Error::Empty("sequence in batch"));
        }
        let max_len = *lens.iter().max().expect("non-empty");
        let mut ids = vec![PAD as usize; rows.len() * max_len];
        for (r, row) in rows.iter().enumerate() {
            for (t, &id) in row.as_ref().iter().enumerate() {
                ids[r * max_len + t] = id as usize;
            }
        }
        Ok(PaddedBatch { ids, lens, max_len })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    /// Ids at time step `t` for every row.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.batch()).map(|r| self.ids[r * self.max_len + t]).collect()
    }

    /// Whether each row is still inside its sequence at step `t`.
    pub fn valid_at(&self, t: usize) -> Vec<bool> {
        self.lens.iter().map(|&l| t < l).collect()
    }

    /// Reverse the unpadded prefix of every row; padding stays at the end.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        for (r, &len) in self.lens.iter().enumerate() {
            let row = &mut out.ids[r * self.max_len..r * self.max_len + len];
            row.reverse();
        }
        out
    }
}

/// Encoder annotations and summaries for a batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[batch, m, state_dim]`.
    pub states: NodeId,
    /// `batch * m`, true on real (non-pad) source positions.
    pub mask: Vec<bool>,
    /// Final top-layer output per row, `[batch, state_dim]`.
    pub summary: NodeId,
    /// Final per-layer states: forward stack, then backward stack if any.
    pub final_states: Vec<CellState>,
    /// Projected attention keys `W1 h_j`, `[batch, m, attention_dim]`.
    pub keys: Option<NodeId>,
    pub batch: usize,
    pub src_len: usize,
}

/// Decoder recurrent state plus the previous attention context.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub layers: Vec<CellState>,
    pub context: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct DecoderStepOutput {
    /// `[batch, V]`.
    pub logits: NodeId,
    /// Attention weights `[batch, m]` for mul/add attention.
    pub attention: Option<NodeId>,
    pub state: DecoderState,
}

/// Attention scoring parameters. `W1` maps encoder states and `W2` decoder
/// states into the shared attention space.
#[derive(Clone, Debug)]
pub struct AttentionScorer {
    pub kind: AttentionType,
    pub w1: ParamId,
    pub w2: ParamId,
    pub v: Option<ParamId>,
    pub dim: usize,
}

impl AttentionScorer {
    /// `W1 h_j` for every position, `[batch, m, dim]`.
    pub fn project_keys<T: Real>(&self, g: &mut Graph<'_, T>, states: NodeId) -> Result<NodeId> {
        let s = g.shape(states).to_vec();
        let flat = g.reshape(states, &[s[0] * s[1], s[2]])?;
        let w1 = g.param(self.w1);
        let keys = g.matmul(flat, w1)?;
        g.reshape(keys, &[s[0], s[1], self.dim])
    }

    /// Unnormalized scores `[batch, m]` of query `s` (`[batch, units]`)
    /// against projected keys.
    pub fn scores<T: Real>(&self, g: &mut Graph<'_, T>, keys: NodeId, query: NodeId) -> Result<NodeId> {
        let w2 = g.param(self.w2);
        let q = g.matmul(query, w2)?;
        match self.kind {
            AttentionType::Mul => g.batched_dot(keys, q),
            AttentionType::Add => {
                let ks = g.shape(keys).to_vec();
                let (b, m) = (ks[0], ks[1]);
                let q = g.reshape(q, &[b, 1, self.dim])?;
                let joint = g.add(keys, q)?;
                let joint = g.tanh(joint);
                let flat = g.reshape(joint, &[b * m, self.dim])?;
                let v = g.param(self.v.expect("additive attention owns v"));
                let s = g.matmul(flat, v)?;
                g.reshape(s, &[b, m])
            }
            other => Err(Error::Config(format!("attention type `{other}` has no scorer"))),
        }
    }
}

/// Softmax of `scores` over unmasked positions and the weighted average of
/// `states` under it. Returns `(context [batch, state_dim], weights [batch, m])`.
pub fn attention_context<T: Real>(
    g: &mut Graph<'_, T>,
    scores: NodeId,
    states: NodeId,
    mask: &[bool],
) -> Result<(NodeId, NodeId)> {
    let weights = g.masked_softmax(scores, mask)?;
    let context = g.weighted_sum(weights, states)?;
    Ok((context, weights))
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    config: ModelConfig,
    src_embed: ParamId,
    tgt_embed: ParamId,
    enc_fwd: Stack,
    enc_bwd: Option<Stack>,
    decoder: Stack,
    attention: Option<AttentionScorer>,
    bridge: Option<(ParamId, ParamId)>,
    out_w: ParamId,
    out_b: ParamId,
}

impl Seq2Seq {
    /// Build the model with freshly initialized parameters.
    pub fn build<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = crate::tensor::seeded_rng(seed);
        let model = Self::register(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn register<T: Real>(config: &ModelConfig, store: &mut ParamStore<T>, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let init = Init::Uniform(c.init_scale);
        let (v, e, u) = (c.vocab_size, c.embedding_dim, c.units);
        let src_embed = store.add_init("embed.src", &[v, e], init, rng)?;
        let tgt_embed = store.add_init("embed.tgt", &[v, e], init, rng)?;

        let per_dir = c.encoder_layers_per_direction();
        let enc_spec = |cfg: &ModelConfig| {
            let mut s = StackSpec::uniform(cfg.encoder.cell, e, u, per_dir, cfg.encoder.residual, cfg.dropout);
            s.layers.iter_mut().for_each(|l| l.forget_bias = cfg.forget_bias);
            s
        };
        let enc_fwd = Stack::build(store, "encoder.fwd", enc_spec(c), c.init_scale, rng)?;
        let enc_bwd = match c.encoder.direction {
            Direction::Bidi => Some(Stack::build(store, "encoder.bwd", enc_spec(c), c.init_scale, rng)?),
            Direction::Uni => None,
        };

        let mut dec_spec = StackSpec::uniform(
            c.decoder.cell,
            e + c.decoder_feed_dim(),
            u,
            c.decoder.depth,
            c.decoder.residual,
            c.dropout,
        );
        dec_spec.layers.iter_mut().for_each(|l| l.forget_bias = c.forget_bias);
        let decoder = Stack::build(store, "decoder", dec_spec, c.init_scale, rng)?;

        let sd = c.state_dim();
        let attention = match c.attention.kind {
            AttentionType::Mul | AttentionType::Add => {
                let a = c.attention.dim;
                let w1 = store.add_init("attention.W1", &[sd, a], init, rng)?;
                let w2 = store.add_init("attention.W2", &[u, a], init, rng)?;
                let v = match c.attention.kind {
                    AttentionType::Add => Some(store.add_init("attention.v", &[a, 1], init, rng)?),
                    _ => None,
                };
                Some(AttentionScorer {
                    kind: c.attention.kind,
                    w1,
                    w2,
                    v,
                    dim: a,
                })
            }
            _ => None,
        };
        let bridge = if c.needs_bridge() {
            Some((
                store.add_init("bridge.W", &[sd, u], init, rng)?,
                store.add_init("bridge.b", &[u], Init::Zeros, rng)?,
            ))
        } else {
            None
        };
        let out_in = if c.attention.kind.uses_attention() { u + sd } else { u };
        let out_w = store.add_init("output.W", &[out_in, v], init, rng)?;
        let out_b = store.add_init("output.b", &[v], Init::Zeros, rng)?;

        Ok(Seq2Seq {
            config: c.clone(),
            src_embed,
            tgt_embed,
            enc_fwd,
            enc_bwd,
            decoder,
            attention,
            bridge,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn attention(&self) -> Option<&AttentionScorer> {
        self.attention.as_ref()
    }

    pub fn output_params(&self) -> (ParamId, ParamId) {
        (self.out_w, self.out_b)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match ids.iter().find(|&&i| i >= vocab) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// Run a stack over the time steps of `batch`, freezing each row's state
    /// once it passes the end of its sequence. Returns per-step outputs, the
    /// final states and the output at each row's last real position.
    fn run_stack<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        stack: &Stack,
        batch: &PaddedBatch,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(Vec<NodeId>, Vec<CellState>, NodeId)> {
        let b = batch.batch();
        let embed = g.param(self.src_embed);
        let mut states = stack.zero_states(g, b)?;
        let mut outputs = Vec::with_capacity(batch.max_len);
        let mut last: Option<NodeId> = None;
        for t in 0..batch.max_len {
            let x = g.embedding(embed, &batch.column(t))?;
            let (out, next) = stack.step(g, x, &states, rng.as_deref_mut())?;
            let valid = batch.valid_at(t);
            if valid.iter().all(|&v| v) {
                states = next;
                last = Some(out);
            } else {
                let mut frozen = Vec::with_capacity(next.len());
                for (new, old) in next.iter().zip(&states) {
                    let h = g.select_rows(&valid, new.h, old.h)?;
                    let c = match (new.c, old.c) {
                        (Some(nc), Some(oc)) => Some(g.select_rows(&valid, nc, oc)?),
                        _ => None,
                    };
                    frozen.push(CellState { h, c });
                }
                states = frozen;
                // Every row is valid at t = 0, so `last` is already set.
                let prev = last.expect("first step has no padding");
                last = Some(g.select_rows(&valid, out, prev)?);
            }
            outputs.push(out);
        }
        Ok((outputs, states, last.expect("at least one step")))
    }

    /// Encode a batch of source sentences.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        source: &PaddedBatch,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<EncoderOutput> {
        self.check_ids(&source.ids)?;
        let source = if self.config.encoder.reverse_source {
            source.reversed()
        } else {
            source.clone()
        };
        let (b, m) = (source.batch(), source.max_len);
        let mask: Vec<bool> = (0..b * m).map(|i| i % m < source.lens[i / m]).collect();

        let (fwd_out, mut final_states, fwd_last) = self.run_stack(g, &self.enc_fwd, &source, rng.as_deref_mut())?;
        let fwd_states = g.stack_time(&fwd_out)?;

        let (states, summary) = match &self.enc_bwd {
            None => (fwd_states, fwd_last),
            Some(bwd) => {
                let reversed = source.reversed();
                let (bwd_out, bwd_final, bwd_last) = self.run_stack(g, bwd, &reversed, rng.as_deref_mut())?;
                let bwd_rev = g.stack_time(&bwd_out)?;
                // Position p of row r was read at step len-1-p.
                let index: Vec<usize> = (0..b * m)
                    .map(|i| {
                        let (r, p) = (i / m, i % m);
                        let len = source.lens[r];
                        if p < len {
                            len - 1 - p
                        } else {
                            p
                        }
                    })
                    .collect();
                let bwd_states = g.gather_time(bwd_rev, &index)?;
                final_states.extend(bwd_final);
                (g.concat(&[fwd_states, bwd_states])?, g.concat(&[fwd_last, bwd_last])?)
            }
        };
        let keys = match &self.attention {
            Some(scorer) => Some(scorer.project_keys(g, states)?),
            None => None,
        };
        Ok(EncoderOutput {
            states,
            mask,
            summary,
            final_states,
            keys,
            batch: b,
            src_len: m,
        })
    }

    /// Decoder state before the first target token.
    pub fn initial_decoder_state<T: Real>(&self, g: &mut Graph<'_, T>, enc: &EncoderOutput) -> Result<DecoderState> {
        let b = enc.batch;
        let mut layers = self.decoder.zero_states(g, b)?;
        let context = match self.config.attention.kind {
            AttentionType::Mul | AttentionType::Add => Some(g.zeros(&[b, self.config.state_dim()])?),
            AttentionType::NoneInput => None,
            AttentionType::NoneState => {
                let init = match self.bridge {
                    Some((w, bias)) => {
                        let w = g.param(w);
                        let bias = g.param(bias);
                        let proj = g.matmul(enc.summary, w)?;
                        g.add(proj, bias)?
                    }
                    None => enc.summary,
                };
                for layer in &mut layers {
                    layer.h = init;
                }
                None
            }
        };
        Ok(DecoderState { layers, context })
    }

    /// One decoder step from the previous target tokens.
    pub fn decode_step<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        prev_tokens: &[usize],
        state: &DecoderState,
        enc: &EncoderOutput,
        rng: Option<&mut SeededRng>,
    ) -> Result<DecoderStepOutput> {
        if prev_tokens.len() != enc.batch {
            return Err(Error::shape("decode_step", &[prev_tokens.len()], &[enc.batch]));
        }
        self.check_ids(prev_tokens)?;
        let embed = g.param(self.tgt_embed);
        let emb = g.embedding(embed, prev_tokens)?;
        let input = match self.config.attention.kind {
            AttentionType::Mul | AttentionType::Add => {
                let ctx = state
                    .context
                    .ok_or_else(|| Error::Config("attention decoder state lacks a context".into()))?;
                g.concat(&[emb, ctx])?
            }
            AttentionType::NoneInput => g.concat(&[emb, enc.summary])?,
            AttentionType::NoneState => emb,
        };
        let (top, layers) = self.decoder.step(g, input, &state.layers, rng)?;

        let (features, attention, context) = match &self.attention {
            Some(scorer) => {
                let keys = enc.keys.ok_or_else(|| Error::Config("encoder output lacks attention keys".into()))?;
                let scores = scorer.scores(g, keys, top)?;
                let (ctx, weights) = attention_context(g, scores, enc.states, &enc.mask)?;
                (g.concat(&[top, ctx])?, Some(weights), Some(ctx))
            }
            None => (top, None, None),
        };
        let w = g.param(self.out_w);
        let bias = g.param(self.out_b);
        let logits = g.matmul(features, w)?;
        let logits = g.add(logits, bias)?;
        Ok(DecoderStepOutput {
            logits,
            attention,
            state: DecoderState { layers, context },
        })
    }

    /// Mean per-token negative log-likelihood of `targets` given `sources`
    /// under teacher forcing. Targets are given without SOS/EOS; EOS is
    /// appended and scored, SOS is fed as the first decoder input.
    pub fn sequence_nll<T: Real, S: AsRef<[TokenId]>>(
        &self,
        g: &mut Graph<'_, T>,
        sources: &[S],
        targets: &[S],
        mut rng: Option<&mut SeededRng>,
    ) -> Result<NodeId> {
        if sources.len() != targets.len() {
            return Err(Error::shape("sequence_nll", &[sources.len()], &[targets.len()]));
        }
        if targets.is_empty() {
            return Err(Error::Empty("target batch"));
        }
        let src = PaddedBatch::new(sources)?;
        let gold: Vec<Vec<TokenId>> = targets
            .iter()
            .map(|t| t.as_ref().iter().copied().chain([EOS]).collect())
            .collect();
        let gold = PaddedBatch::new(&gold)?;

        let enc = self.encode(g, &src, rng.as_deref_mut())?;
        let mut state = self.initial_decoder_state(g, &enc)?;
        let mut prev = vec![SOS as usize; src.batch()];
        let mut total: Option<NodeId> = None;
        let tokens: usize = gold.lens.iter().sum();
        for t in 0..gold.max_len {
            let step = self.decode_step(g, &prev, &state, &enc, rng.as_deref_mut())?;
            let targets_t = gold.column(t);
            let weights: Vec<T> = gold.valid_at(t).iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
            let nll = g.cross_entropy(step.logits, &targets_t, &weights)?;
            total = Some(match total {
                Some(acc) => g.add(acc, nll)?,
                None => nll,
            });
            state = step.state;
            prev = targets_t;
        }
        let total = total.expect("targets are non-empty");
        Ok(g.scale(total, T::of(1.0 / tokens as f64)))
    }
}

/// Closed-form parameter count of the model `config` describes.
pub fn count_parameters(config: &ModelConfig) -> usize {
    let c = config;
    let (v, e, u, sd) = (c.vocab_size, c.embedding_dim, c.units, c.state_dim());
    let cell = |kind: crate::cells::CellKind, input: usize| (input + u + 1) * u * kind.gates();
    let stack = |kind, first_input: usize, depth: usize| {
        (0..depth)
            .map(|l| cell(kind, if l == 0 { first_input } else { u }))
            .sum::<usize>()
    };
    let directions = match c.encoder.direction {
        Direction::Uni => 1,
        Direction::Bidi => 2,
    };
    let embeddings = 2 * v * e;
    let encoder = directions * stack(c.encoder.cell, e, c.encoder_layers_per_direction());
    let decoder = stack(c.decoder.cell, e + c.decoder_feed_dim(), c.decoder.depth);
    let a = c.attention.dim;
    let attention = match c.attention.kind {
        AttentionType::Mul => sd * a + u * a,
        AttentionType::Add => sd * a + u * a + a,
        _ => 0,
    };
    let bridge = if c.needs_bridge() { sd * u + u } else { 0 };
    let out_in = if c.attention.kind.uses_attention() { u + sd } else { u };
    embeddings + encoder + decoder + attention + bridge + out_in * v + v
}

/// Encoder outputs for one sentence, detached from any graph so they can be
/// replayed into per-step inference graphs.
#[derive(Clone, Debug)]
pub struct EncodedSentence<T> {
    pub states: Tensor<T>,
    pub keys: Option<Tensor<T>>,
    pub summary: Tensor<T>,
}

/// Decoder state values for one hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderSnapshot<T> {
    pub h: Vec<Vec<T>>,
    pub c: Vec<Option<Vec<T>>>,
    pub context: Option<Vec<T>>,
}

impl Seq2Seq {
    /// Encode a single sentence (batch of one) without recording gradients.
    pub fn encode_sentence<T: Real>(&self, params: &ParamStore<T>, source: &[TokenId]) -> Result<EncodedSentence<T>> {
        if source.is_empty() {
            return Err(Error::Empty("source sentence"));
        }
        let mut g = Graph::inference(params);
        let enc = self.encode(&mut g, &PaddedBatch::new(&[source])?, None)?;
        Ok(EncodedSentence {
            states: g.tensor(enc.states),
            keys: enc.keys.map(|k| g.tensor(k)),
            summary: g.tensor(enc.summary),
        })
    }

    /// Replicate a sentence encoding `n` times as constants of `g`.
    fn replay_encoding<T: Real>(&self, g: &mut Graph<'_, T>, enc: &EncodedSentence<T>, n: usize) -> Result<EncoderOutput> {
        let repeat = |t: &Tensor<T>| {
            let mut shape = t.shape().to_vec();
            shape[0] = n;
            let data: Vec<T> = (0..n).flat_map(|_| t.data().iter().copied()).collect();
            (shape, data)
        };
        let (shape, data) = repeat(&enc.states);
        let m = shape[1];
        let states = g.constant_from(&shape, data)?;
        let keys = match &enc.keys {
            Some(k) => {
                let (shape, data) = repeat(k);
                Some(g.constant_from(&shape, data)?)
            }
            None => None,
        };
        let (shape, data) = repeat(&enc.summary);
        let summary = g.constant_from(&shape, data)?;
        Ok(EncoderOutput {
            states,
            mask: vec![true; n * m],
            summary,
            final_states: Vec::new(),
            keys,
            batch: n,
            src_len: m,
        })
    }

    pub fn start_snapshot<T: Real>(&self, params: &ParamStore<T>, enc: &EncodedSentence<T>) -> Result<DecoderSnapshot<T>> {
        let mut g = Graph::inference(params);
        let out = self.replay_encoding(&mut g, enc, 1)?;
        let state = self.initial_decoder_state(&mut g, &out)?;
        Ok(DecoderSnapshot {
            h: state.layers.iter().map(|l| g.value(l.h).to_vec()).collect(),
            c: state.layers.iter().map(|l| l.c.map(|c| g.value(c).to_vec())).collect(),
            context: state.context.map(|c| g.value(c).to_vec()),
        })
    }

    /// Advance several hypotheses of one sentence by one token. Returns
    /// log-probabilities over the vocabulary and the new state per hypothesis.
    pub fn step_snapshots<T: Real>(
        &self,
        params: &ParamStore<T>,
        enc: &EncodedSentence<T>,
        items: &[(&DecoderSnapshot<T>, TokenId)],
    ) -> Result<Vec<(Vec<f64>, DecoderSnapshot<T>)>> {
        let n = items.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::inference(params);
        let out = self.replay_encoding(&mut g, enc, n)?;
        let u = self.config.units;
        let stacked = |rows: Vec<&Vec<T>>| rows.into_iter().flat_map(|r| r.iter().copied()).collect::<Vec<T>>();
        let depth = self.decoder.depth();
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let h = g.constant_from(&[n, u], stacked(items.iter().map(|(s, _)| &s.h[l]).collect()))?;
            let c = match items[0].0.c[l] {
                Some(_) => {
                    let rows = items
                        .iter()
                        .map(|(s, _)| s.c[l].as_ref().ok_or_else(|| Error::Config("inconsistent snapshots".into())))
                        .collect::<Result<Vec<_>>>()?;
                    Some(g.constant_from(&[n, u], stacked(rows))?)
                }
                None => None,
            };
            layers.push(CellState { h, c });
        }
        let context = match items[0].0.context {
            Some(ref first) => {
                let width = first.len();
                let rows = items
                    .iter()
                    .map(|(s, _)| s.context.as_ref().ok_or_else(|| Error::Config("inconsistent snapshots".into())))
                    .collect::<Result<Vec<_>>>()?;
                Some(g.constant_from(&[n, width], stacked(rows))?)
            }
            None => None,
        };
        let prev: Vec<usize> = items.iter().map(|(_, t)| *t as usize).collect();
        let step = self.decode_step(&mut g, &prev, &DecoderState { layers, context }, &out, None)?;

        let vocab = self.config.vocab_size;
        let logits = g.value(step.logits);
        let mut results = Vec::with_capacity(n);
        for r in 0..n {
            let row = |id: NodeId, width: usize| g.value(id)[r * width..(r + 1) * width].to_vec();
            let snapshot = DecoderSnapshot {
                h: step.state.layers.iter().map(|l| row(l.h, u)).collect(),
                c: step.state.layers.iter().map(|l| l.c.map(|c| row(c, u))).collect(),
                context: step.state.context.map(|c| row(c, self.config.state_dim())),
            };
            results.push((crate::graph::log_softmax(&logits[r * vocab..(r + 1) * vocab]), snapshot));
        }
        Ok(results)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::config::{AttentionConfig, DecoderConfig, EncoderConfig};
    use crate::cells::ResidualMode;

    pub(crate) fn tiny(kind: AttentionType, direction: Direction) -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            embedding_dim: 3,
            units: 4,
            encoder: EncoderConfig {
                direction,
                depth: 2,
                reverse_source: false,
                cell: CellKind::Gru,
                residual: ResidualMode::None,
            },
            decoder: DecoderConfig {
                depth: 2,
                cell: CellKind::Gru,
                residual: ResidualMode::None,
            },
            attention: AttentionConfig { kind, dim: 5 },
            dropout: 0.0,
            forget_bias: 1.0,
            init_scale: 0.3,
        }
    }

    #[test]
    fn parameter_count_matches_construction() {
        for kind in [AttentionType::Mul, AttentionType::Add, AttentionType::NoneState, AttentionType::NoneInput] {
            for dir in [Direction::Uni, Direction::Bidi] {
                let cfg = tiny(kind, dir);
                let (_, store) = Seq2Seq::build::<f32>(&cfg, 1).unwrap();
                assert_eq!(store.scalar_count(), count_parameters(&cfg), "{kind} {dir}");
            }
        }
    }

    #[test]
    fn state_dims_by_direction() {
        for (dir, width) in [(Direction::Bidi, 8), (Direction::Uni, 4)] {
            let cfg = tiny(AttentionType::Mul, dir);
            let (model, store) = Seq2Seq::build::<f64>(&cfg, 3).unwrap();
            let mut g = Graph::inference(&store);
            let batch = PaddedBatch::new(&[vec![4u32, 5, 6], vec![7u32]]).unwrap();
            let enc = model.encode(&mut g, &batch, None).unwrap();
            assert_eq!(g.shape(enc.states), &[2, 3, width]);
            assert_eq!(g.shape(enc.summary), &[2, width]);
            assert_eq!(enc.mask, vec![true, true, true, true, false, false]);
        }
    }

    #[test]
    fn reversal_is_an_involution_that_ignores_padding() {
        let batch = PaddedBatch::new(&[vec![4u32, 5, 6], vec![7u32, 8]]).unwrap();
        let rev = batch.reversed();
        assert_eq!(rev.ids, vec![6, 5, 4, 8, 7, 0]);
        assert_eq!(rev.reversed(), batch);
    }

    #[test]
    fn single_token_bidi_concatenates_both_directions() {
        let cfg = tiny(AttentionType::Mul, Direction::Bidi);
        let (model, store) = Seq2Seq::build::<f64>(&cfg, 5).unwrap();
        let mut g = Graph::inference(&store);
        let enc = model.encode(&mut g, &PaddedBatch::new(&[vec![6u32]]).unwrap(), None).unwrap();
        let states = g.value(enc.states).to_vec();

        // Run each direction's stack by hand on the lone token.
        let mut h = Graph::inference(&store);
        let table = h.param(store.id("embed.src").unwrap());
        let x = h.embedding(table, &[6]).unwrap();
        let mut expected = Vec::new();
        for stack in [&model.enc_fwd, model.enc_bwd.as_ref().unwrap()] {
            let s0 = stack.zero_states(&mut h, 1).unwrap();
            let (out, _) = stack.step(&mut h, x, &s0, None).unwrap();
            expected.extend_from_slice(h.value(out));
        }
        assert_eq!(states, expected);
    }

    #[test]
    fn padding_does_not_change_encodings() {
        let cfg = tiny(AttentionType::Mul, Direction::Bidi);
        let (model, store) = Seq2Seq::build::<f64>(&cfg, 8).unwrap();
        let mut g = Graph::inference(&store);
        let alone = model.encode(&mut g, &PaddedBatch::new(&[vec![4u32, 5]]).unwrap(), None).unwrap();
        let padded = model
            .encode(&mut g, &PaddedBatch::new(&[vec![4u32, 5], vec![6u32, 7, 8, 4]]).unwrap(), None)
            .unwrap();
        // Row 0 of the padded batch spans 4 positions; its first 2 match.
        let a = g.value(alone.states);
        let p = &g.value(padded.states)[..a.len()];
        assert!(a.iter().zip(p).all(|(x, y)| (x - y).abs() < 1e-12));
        let (a, p) = (g.value(alone.summary), &g.value(padded.summary)[..8]);
        assert!(a.iter().zip(p).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn mul_scores_by_hand() {
        let mut store = ParamStore::<f64>::new();
        let eye = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let w1 = store.add("W1", eye.clone()).unwrap();
        let w2 = store.add("W2", eye).unwrap();
        let scorer = AttentionScorer {
            kind: AttentionType::Mul,
            w1,
            w2,
            v: None,
            dim: 2,
        };
        let mut g = Graph::new(&store);
        let h = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let keys = scorer.project_keys(&mut g, h).unwrap();
        let s = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let scores = scorer.scores(&mut g, keys, s).unwrap();
        assert_eq!(g.value(scores), &[1.0, 0.0]);

        let s2 = g.constant(Tensor::from_f64(&[1, 2], &[2.0, 0.0]).unwrap());
        let doubled = scorer.scores(&mut g, keys, s2).unwrap();
        assert_eq!(g.value(doubled), &[2.0, 0.0]);

        let (ctx, a) = attention_context(&mut g, scores, h, &[true, true]).unwrap();
        assert!((g.value(a)[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((g.value(ctx)[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((g.value(ctx)[1] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn additive_with_zero_v_scores_zero() {
        let mut store = ParamStore::<f64>::new();
        let w1 = store.add_init("W1", &[2, 3], Init::Uniform(1.0), &mut crate::tensor::seeded_rng(1)).unwrap();
        let w2 = store.add_init("W2", &[2, 3], Init::Uniform(1.0), &mut crate::tensor::seeded_rng(2)).unwrap();
        let v = store.add("v", Tensor::zeros(&[3, 1]).unwrap()).unwrap();
        let scorer = AttentionScorer {
            kind: AttentionType::Add,
            w1,
            w2,
            v: Some(v),
            dim: 3,
        };
        let mut g = Graph::new(&store);
        let h = g.constant(Tensor::from_f64(&[1, 3, 2], &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap());
        let keys = scorer.project_keys(&mut g, h).unwrap();
        let s = g.constant(Tensor::from_f64(&[1, 2], &[0.3, -0.7]).unwrap());
        let scores = scorer.scores(&mut g, keys, s).unwrap();
        assert_eq!(g.value(scores), &[0.0, 0.0, 0.0]);

        let none = AttentionScorer {
            kind: AttentionType::NoneInput,
            ..scorer
        };
        assert!(none.scores(&mut g, keys, s).is_err());
    }

    #[test]
    fn attention_context_edge_cases() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let h = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let eq = g.constant(Tensor::from_f64(&[1, 2], &[0.3, 0.3]).unwrap());
        let (c, a) = attention_context(&mut g, eq, h, &[true, true]).unwrap();
        assert_eq!(g.value(a), &[0.5, 0.5]);
        assert_eq!(g.value(c), &[0.5, 0.5]);

        let (c, a) = attention_context(&mut g, eq, h, &[true, false]).unwrap();
        assert_eq!(g.value(a), &[1.0, 0.0]);
        assert_eq!(g.value(c), &[1.0, 0.0]);

        assert!(attention_context(&mut g, eq, h, &[false, false]).is_err());
    }

    #[test]
    fn decode_step_shapes_and_uniform_output() {
        for kind in [AttentionType::Mul, AttentionType::Add, AttentionType::NoneState, AttentionType::NoneInput] {
            let cfg = tiny(kind, Direction::Bidi);
            let (model, mut store) = Seq2Seq::build::<f64>(&cfg, 2).unwrap();
            let (w, b) = model.output_params();
            store.value_mut(w).data_mut().fill(0.0);
            store.value_mut(b).data_mut().fill(0.0);
            let mut g = Graph::inference(&store);
            let batch = PaddedBatch::new(&[vec![4u32, 5, 6], vec![7u32]]).unwrap();
            let enc = model.encode(&mut g, &batch, None).unwrap();
            let state = model.initial_decoder_state(&mut g, &enc).unwrap();
            let out = model.decode_step(&mut g, &[SOS as usize; 2], &state, &enc, None).unwrap();
            assert_eq!(g.shape(out.logits), &[2, 9]);
            let probs = g.softmax(out.logits);
            for p in g.value(probs) {
                assert!((p - 1.0 / 9.0).abs() < 1e-12);
            }
            if let Some(a) = out.attention {
                let a = g.value(a);
                assert!((a[0] + a[1] + a[2] - 1.0).abs() < 1e-9);
                assert!((a[3] - 1.0).abs() < 1e-12 && a[4] == 0.0 && a[5] == 0.0);
            }
        }
    }

    #[test]
    fn uniform_model_has_log_v_loss() {
        let mut cfg = tiny(AttentionType::Mul, Direction::Bidi);
        cfg.vocab_size = 5;
        let (model, mut store) = Seq2Seq::build::<f64>(&cfg, 2).unwrap();
        let (w, b) = model.output_params();
        store.value_mut(w).data_mut().fill(0.0);
        store.value_mut(b).data_mut().fill(0.0);
        let mut g = Graph::new(&store);
        let loss = model
            .sequence_nll(&mut g, &[vec![4u32, 4], vec![4]], &[vec![4u32], vec![4, 4, 4]], None)
            .unwrap();
        assert!((g.scalar(loss) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn padding_rows_do_not_change_the_loss() {
        let cfg = tiny(AttentionType::Add, Direction::Bidi);
        let (model, store) = Seq2Seq::build::<f64>(&cfg, 4).unwrap();
        let src = vec![vec![4u32, 5, 6]];
        let tgt = vec![vec![7u32, 8]];
        let mut g = Graph::new(&store);
        let single = model.sequence_nll(&mut g, &src, &tgt, None).unwrap();
        let single = g.scalar(single);

        // Same pair twice, batched next to a longer pair that forces padding;
        // the loss per real token is an average, so compare the duplicated pair alone.
        let mut g = Graph::new(&store);
        let dup = model
            .sequence_nll(&mut g, &[src[0].clone(), src[0].clone()], &[tgt[0].clone(), tgt[0].clone()], None)
            .unwrap();
        assert!((g.scalar(dup) - single).abs() < 1e-12);

        let mut g = Graph::new(&store);
        let long_src = vec![4u32, 5, 6, 7, 8];
        let long_tgt = vec![5u32, 6, 7, 8];
        let mixed = model
            .sequence_nll(&mut g, &[src[0].clone(), long_src.clone()], &[tgt[0].clone(), long_tgt.clone()], None)
            .unwrap();
        let mut h = Graph::new(&store);
        let long_alone = model.sequence_nll(&mut h, &[long_src], &[long_tgt], None).unwrap();
        // Token-weighted mean of the two sentences: 3 tokens and 5 tokens.
        let expected = (3.0 * single + 5.0 * h.scalar(long_alone)) / 8.0;
        assert!((g.scalar(mixed) - expected).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let cfg = tiny(AttentionType::Mul, Direction::Uni);
        let (model, store) = Seq2Seq::build::<f32>(&cfg, 1).unwrap();
        let mut g = Graph::inference(&store);
        let err = model.encode(&mut g, &PaddedBatch::new(&[vec![4u32, 99]]).unwrap(), None);
        assert!(matches!(err, Err(Error::TokenOutOfRange { id: 99, vocab: 9 })));
    }

    #[test]
    fn snapshot_stepping_matches_batched_decoding() {
        let cfg = tiny(AttentionType::Mul, Direction::Bidi);
        let (model, store) = Seq2Seq::build::<f64>(&cfg, 6).unwrap();
        let src = [4u32, 5, 6, 7];
        let enc = model.encode_sentence(&store, &src).unwrap();
        let start = model.start_snapshot(&store, &enc).unwrap();
        let stepped = model.step_snapshots(&store, &enc, &[(&start, SOS), (&start, 5)]).unwrap();

        let mut g = Graph::inference(&store);
        let batch = PaddedBatch::new(&[src.to_vec()]).unwrap();
        let e = model.encode(&mut g, &batch, None).unwrap();
        let s = model.initial_decoder_state(&mut g, &e).unwrap();
        let out = model.decode_step(&mut g, &[SOS as usize], &s, &e, None).unwrap();
        let lp = crate::graph::log_softmax(g.value(out.logits));
        assert_eq!(stepped[0].0, lp);
        assert_ne!(stepped[1].0, lp);
    }
}
