//! Training loop: bucketed batches, Adam with global-norm clipping, periodic
//! validation and best-checkpoint selection by validation BLEU.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::beam::greedy_batch;
use crate::bleu::corpus_bleu_with;
use crate::checkpoint::{self, Checkpoint, Metrics};
use crate::data::ParallelCorpus;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::Graph;
use crate::model::Seq2Seq;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::derived_rng;
use crate::vocab::TokenId;

/// Mixed into the seed for dropout masks so they do not share a stream with
/// batch shuffling.
const DROPOUT_STREAM: u64 = 0xd50f_0a7e_0000_0000;

pub const LOG_HEADER: &str = "step,train_loss,val_loss,val_ppl,val_bleu";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm threshold; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    /// Drives batch order and dropout masks.
    pub seed: u64,
    /// Output cap for validation decoding.
    pub max_decode_len: usize,
    /// Stop at the first checkpoint whose validation BLEU reaches this.
    pub stop_at_bleu: Option<f64>,
    /// Stop at the first checkpoint after this much wall time.
    pub time_limit: Option<Duration>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_steps: 10_000,
            checkpoint_every: 500,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            seed: 1,
            max_decode_len: 100,
            stop_at_bleu: None,
            time_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.checkpoint_every == 0 || self.max_decode_len == 0 {
            return Err(Error::Config(
                "batch size, max steps, checkpoint interval and decode length must be positive".into(),
            ));
        }
        if !(self.adam.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ppl: f64,
    pub val_bleu: f64,
}

impl LogRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.4}",
            self.step, self.train_loss, self.val_loss, self.val_ppl, self.val_bleu
        )
    }
}

/// Highest validation BLEU; the earliest step wins ties.
pub fn select_best(records: &[LogRecord]) -> Result<&LogRecord> {
    let mut best: Option<&LogRecord> = None;
    for r in records {
        if best.map_or(true, |b| r.val_bleu > b.val_bleu || (r.val_bleu == b.val_bleu && r.step < b.step)) {
            best = Some(r);
        }
    }
    best.ok_or(Error::Empty("checkpoint list"))
}

#[derive(Clone, Debug)]
pub struct TrainReport<T> {
    pub log: Vec<LogRecord>,
    pub best: LogRecord,
    pub best_params: ParamStore<T>,
}

/// Renders decoded ids as a whitespace-tokenized line for BLEU.
pub type Renderer = Box<dyn Fn(&[TokenId]) -> String + Send + Sync>;

pub struct Trainer<T: Real> {
    pub model: Seq2Seq,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    pub step: u64,
    pub config: TrainConfig,
    renderer: Renderer,
    epoch_cache: Option<(u64, Vec<Vec<usize>>)>,
}

fn render_ids(ids: &[TokenId]) -> String {
    ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Seq2Seq, params: ParamStore<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam, &params);
        Ok(Trainer {
            model,
            params,
            adam,
            step: 0,
            config,
            renderer: Box::new(render_ids),
            epoch_cache: None,
        })
    }

    /// Continue from a saved checkpoint.
    pub fn resume(model: Seq2Seq, ckpt: Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        if ckpt.config_digest != model.config().digest() {
            return Err(Error::Checkpoint("checkpoint was written for a different model config".into()));
        }
        let mut trainer = Trainer::new(model, ckpt.params, config)?;
        if let Some(mut adam) = ckpt.adam {
            adam.config = trainer.config.adam;
            trainer.adam = adam;
        }
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    pub fn with_renderer(mut self, renderer: Renderer) -> Self {
        self.renderer = renderer;
        self
    }

    pub fn checkpoint(&self, metrics: Metrics) -> Checkpoint<T> {
        Checkpoint {
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            step: self.step,
            metrics,
            config_digest: self.model.config().digest(),
        }
    }

    fn batch_for_step(&mut self, corpus: &ParallelCorpus) -> Vec<usize> {
        let per_epoch = corpus.len().div_ceil(self.config.batch_size) as u64;
        let (epoch, index) = (self.step / per_epoch, self.step % per_epoch);
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.epoch_cache = Some((epoch, corpus.batches(self.config.batch_size, self.config.seed, epoch)));
        }
        self.epoch_cache.as_ref().expect("just filled").1[index as usize].clone()
    }

    /// One optimizer update. Returns the batch loss.
    pub fn train_step(&mut self, corpus: &ParallelCorpus) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::Empty("training corpus"));
        }
        let batch = self.batch_for_step(corpus);
        let src: Vec<&[TokenId]> = batch.iter().map(|&i| corpus.sources[i].as_slice()).collect();
        let tgt: Vec<&[TokenId]> = batch.iter().map(|&i| corpus.targets[i].as_slice()).collect();
        let mut rng = derived_rng(self.config.seed ^ DROPOUT_STREAM, self.step);
        let mut g = Graph::new(&self.params);
        let loss = self.model.sequence_nll(&mut g, &src, &tgt, Some(&mut rng))?;
        let value = g.scalar(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: self.step + 1,
                loss: value,
            });
        }
        let mut grads = g.backward(loss)?;
        grads.clip_global_norm(self.config.clip_norm);
        self.adam.update(&mut self.params, &grads)?;
        self.step += 1;
        Ok(value)
    }

    /// Token-weighted validation NLL, its perplexity and greedy BLEU.
    pub fn evaluate(&self, valid: &ParallelCorpus) -> Result<(f64, f64, f64)> {
        if valid.is_empty() {
            return Err(Error::Empty("validation corpus"));
        }
        let chunks: Vec<Vec<usize>> = (0..valid.len())
            .collect::<Vec<_>>()
            .chunks(self.config.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        let per_chunk = Exec::default().map(&chunks, |chunk| -> Result<(f64, usize, Vec<String>)> {
            let src: Vec<&[TokenId]> = chunk.iter().map(|&i| valid.sources[i].as_slice()).collect();
            let tgt: Vec<&[TokenId]> = chunk.iter().map(|&i| valid.targets[i].as_slice()).collect();
            let tokens: usize = tgt.iter().map(|t| t.len() + 1).sum();
            let mut g = Graph::inference(&self.params);
            let nll = self.model.sequence_nll(&mut g, &src, &tgt, None)?;
            let nll = g.scalar(nll).as_f64() * tokens as f64;
            let hyps = greedy_batch(&self.model, &self.params, &src, self.config.max_decode_len)?;
            Ok((nll, tokens, hyps.iter().map(|h| (self.renderer)(h)).collect()))
        });
        let (mut nll, mut tokens, mut hyps) = (0.0, 0, Vec::with_capacity(valid.len()));
        for chunk in per_chunk {
            let (n, t, h) = chunk?;
            nll += n;
            tokens += t;
            hyps.extend(h);
        }
        let refs: Vec<String> = valid.targets.iter().map(|t| (self.renderer)(t)).collect();
        let loss = nll / tokens as f64;
        let bleu = corpus_bleu_with(&hyps, &refs, Exec::default())?.bleu;
        Ok((loss, loss.exp(), bleu))
    }

    /// Train until `max_steps`, validating every `checkpoint_every` steps and
    /// at the end. With `out_dir`, checkpoints and the CSV log are written
    /// there as they are produced.
    pub fn run(&mut self, train: &ParallelCorpus, valid: &ParallelCorpus, out_dir: Option<&Path>) -> Result<TrainReport<T>> {
        let started = Instant::now();
        let mut log: Vec<LogRecord> = Vec::new();
        let mut best: Option<(LogRecord, ParamStore<T>)> = None;
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        while self.step < self.config.max_steps {
            loss_sum += self.train_step(train)?;
            loss_count += 1;
            let at_end = self.step == self.config.max_steps;
            if self.step % self.config.checkpoint_every != 0 && !at_end {
                continue;
            }
            let (val_loss, val_ppl, val_bleu) = self.evaluate(valid)?;
            let record = LogRecord {
                step: self.step,
                train_loss: loss_sum / loss_count as f64,
                val_loss,
                val_ppl,
                val_bleu,
            };
            (loss_sum, loss_count) = (0.0, 0);
            let improved = best.as_ref().map_or(true, |(b, _)| record.val_bleu > b.val_bleu);
            if let Some(dir) = out_dir {
                self.persist(dir, &record, improved)?;
            }
            if improved {
                best = Some((record, self.params.clone()));
            }
            log.push(record);
            let reached = self.config.stop_at_bleu.is_some_and(|t| val_bleu >= t);
            let timed_out = self.config.time_limit.is_some_and(|t| started.elapsed() >= t);
            if reached || timed_out {
                break;
            }
        }
        let (best, best_params) = best.ok_or(Error::Empty("training run produced no checkpoints"))?;
        Ok(TrainReport { log, best, best_params })
    }

    fn persist(&self, dir: &Path, record: &LogRecord, improved: bool) -> Result<()> {
        let ckpt = self.checkpoint(Metrics {
            val_loss: Some(record.val_loss),
            val_ppl: Some(record.val_ppl),
            val_bleu: Some(record.val_bleu),
        });
        checkpoint::save(&checkpoint_path(dir, record.step), &ckpt)?;
        if improved {
            checkpoint::save(&dir.join("best.s2s"), &ckpt)?;
        }
        let log_path = dir.join("train_log.csv");
        let fresh = !log_path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&log_path)?;
        if fresh {
            writeln!(f, "{LOG_HEADER}")?;
        }
        writeln!(f, "{}", record.csv_row())?;
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:08}.s2s"))
}
