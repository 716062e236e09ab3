//! Replicated experiments over one hyperparameter axis and their report
//! tables.
//!
//! An experiment file is a flat `key: value` config. Besides the model keys
//! (see [`ModelConfig::apply`]) it accepts:
//!
//! * `name`, `seeds: 1,2,3,4` or `replicas: 4`
//! * `sweep.axis: attention.type` and `sweep.values: mul,add`
//! * `data.task: copy|reverse` with `data.train_pairs`, `data.valid_pairs`,
//!   `data.test_pairs`, `data.min_len`, `data.max_len`, `data.seed`; or
//!   `data.train_src`, `data.train_tgt`, `data.valid_src`, `data.valid_tgt`,
//!   optional `data.test_src`/`data.test_tgt`, `data.vocab` and
//!   `data.max_sentence_len` (paths relative to the config file)
//! * `train.batch_size`, `train.max_steps`, `train.checkpoint_every`,
//!   `train.lr`, `train.clip_norm`, `train.max_decode_len`
//! * `beam.width`, `beam.alpha`, `beam.max_len` for the final test decode

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::beam::{translate_corpus, BeamConfig, Search};
use crate::bleu::corpus_bleu_with;
use crate::bpe::debpe_line;
use crate::config::{KeyValues, ModelConfig};
use crate::data::{synthetic_corpus, synthetic_vocabulary, ParallelCorpus, SyntheticTask, DEFAULT_MAX_SENTENCE_LEN};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{count_parameters, Seq2Seq};
use crate::optim::AdamConfig;
use crate::real::Real;
use crate::train::{TrainConfig, Trainer};
use crate::vocab::{TokenId, Vocabulary};

pub const DEFAULT_REPLICAS: usize = 4;

/// Mean, sample standard deviation and maximum of replica scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// `n - 1` denominator; 0 for a single value.
    pub std: f64,
    pub max: f64,
    pub values: Vec<f64>,
}

impl Aggregate {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("replica scores"));
        }
        // Sorting first makes the float sums independent of replica order.
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let std = if sorted.len() < 2 {
            0.0
        } else {
            (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        let max = *sorted.last().expect("non-empty");
        Ok(Aggregate {
            mean,
            std,
            max,
            values: values.to_vec(),
        })
    }
}

impl fmt::Display for Aggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2} ({:.2})", self.mean, self.std, self.max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Synthetic {
        task: SyntheticTask,
        train_pairs: usize,
        valid_pairs: usize,
        test_pairs: usize,
        min_len: usize,
        max_len: usize,
        seed: u64,
    },
    Files {
        train_src: PathBuf,
        train_tgt: PathBuf,
        valid_src: PathBuf,
        valid_tgt: PathBuf,
        test: Option<(PathBuf, PathBuf)>,
        vocab: PathBuf,
        max_sentence_len: usize,
    },
}

impl DataSpec {
    fn take(kv: &mut KeyValues, base: &Path) -> Result<Self> {
        let path = |kv: &mut KeyValues, key: &str| -> Result<Option<PathBuf>> {
            Ok(kv.take::<String>(key)?.map(|p| base.join(p)))
        };
        if let Some(task) = kv.take::<SyntheticTask>("data.task")? {
            return Ok(DataSpec::Synthetic {
                task,
                train_pairs: kv.take_or("data.train_pairs", 2000)?,
                valid_pairs: kv.take_or("data.valid_pairs", 200)?,
                test_pairs: kv.take_or("data.test_pairs", 200)?,
                min_len: kv.take_or("data.min_len", 5)?,
                max_len: kv.take_or("data.max_len", 10)?,
                seed: kv.take_or("data.seed", 1)?,
            });
        }
        let need = |kv: &mut KeyValues, key: &str| -> Result<PathBuf> {
            path(kv, key)?.ok_or_else(|| Error::Config(format!("missing `{key}` (or set `data.task`)")))
        };
        let train_src = need(kv, "data.train_src")?;
        let train_tgt = need(kv, "data.train_tgt")?;
        let valid_src = need(kv, "data.valid_src")?;
        let valid_tgt = need(kv, "data.valid_tgt")?;
        let test = match (path(kv, "data.test_src")?, path(kv, "data.test_tgt")?) {
            (Some(s), Some(t)) => Some((s, t)),
            (None, None) => None,
            _ => return Err(Error::Config("set both or neither of data.test_src and data.test_tgt".into())),
        };
        Ok(DataSpec::Files {
            train_src,
            train_tgt,
            valid_src,
            valid_tgt,
            test,
            vocab: need(kv, "data.vocab")?,
            max_sentence_len: kv.take_or("data.max_sentence_len", DEFAULT_MAX_SENTENCE_LEN)?,
        })
    }
}

/// Loaded corpora for one variant.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
}

impl Dataset {
    pub fn load(spec: &DataSpec, vocab_size: usize) -> Result<Self> {
        match spec {
            DataSpec::Synthetic {
                task,
                train_pairs,
                valid_pairs,
                test_pairs,
                min_len,
                max_len,
                seed,
            } => {
                let make = |n: usize, stream: u64| {
                    synthetic_corpus(*task, n, vocab_size, *min_len, *max_len, seed.wrapping_mul(3).wrapping_add(stream))
                };
                Ok(Dataset {
                    vocab: synthetic_vocabulary(vocab_size),
                    train: make(*train_pairs, 0)?,
                    valid: make(*valid_pairs, 1)?,
                    test: make(*test_pairs, 2)?,
                })
            }
            DataSpec::Files {
                train_src,
                train_tgt,
                valid_src,
                valid_tgt,
                test,
                vocab,
                max_sentence_len,
            } => {
                let vocab = Vocabulary::read(vocab)?;
                let (train, _) = ParallelCorpus::read(train_src, train_tgt, &vocab, *max_sentence_len)?;
                let (valid, _) = ParallelCorpus::read(valid_src, valid_tgt, &vocab, usize::MAX)?;
                let test = match test {
                    Some((s, t)) => ParallelCorpus::read(s, t, &vocab, usize::MAX)?.0,
                    None => valid.clone(),
                };
                Ok(Dataset {
                    vocab,
                    train,
                    valid,
                    test,
                })
            }
        }
    }

    /// Detokenized text of `ids`, as scored by BLEU.
    pub fn render(&self, ids: &[TokenId]) -> String {
        debpe_line(&self.vocab.decode(ids))
    }
}

/// Model, training and search settings of one row of the table.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub beam: BeamConfig,
}

impl Variant {
    fn take(label: String, kv: &mut KeyValues) -> Result<Self> {
        let mut model = ModelConfig::default();
        model.apply(kv)?;
        let d = TrainConfig::default();
        let train = TrainConfig {
            batch_size: kv.take_or("train.batch_size", d.batch_size)?,
            max_steps: kv.take_or("train.max_steps", d.max_steps)?,
            checkpoint_every: kv.take_or("train.checkpoint_every", d.checkpoint_every)?,
            adam: AdamConfig {
                lr: kv.take_or("train.lr", d.adam.lr)?,
                ..d.adam
            },
            clip_norm: kv.take_or("train.clip_norm", d.clip_norm)?,
            max_decode_len: kv.take_or("train.max_decode_len", d.max_decode_len)?,
            ..d
        };
        train.validate()?;
        let b = BeamConfig::default();
        let beam = BeamConfig {
            width: kv.take_or("beam.width", b.width)?,
            alpha: kv.take_or("beam.alpha", b.alpha)?,
            max_len: kv.take_or("beam.max_len", b.max_len)?,
        };
        beam.validate()?;
        Ok(Variant {
            label,
            model,
            train,
            beam,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub name: String,
    /// Swept key, `None` for a single-row experiment.
    pub axis: Option<String>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub data: DataSpec,
    /// The experiment file as given.
    pub text: String,
}

impl ExperimentSpec {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kv = KeyValues::parse(text, path)?;
        let stem = path.file_stem().map_or("experiment".into(), |s| s.to_string_lossy().into_owned());
        let name = kv.take_or("name", stem)?;
        let axis: Option<String> = kv.take("sweep.axis")?;
        let values: Option<Vec<String>> = kv.take_list("sweep.values")?;
        let replicas: Option<usize> = kv.take("replicas")?;
        let seeds = match (kv.take_list::<u64>("seeds")?, replicas) {
            (Some(seeds), Some(n)) if seeds.len() != n => {
                return Err(Error::Config(format!("{} seeds listed but replicas is {n}", seeds.len())))
            }
            (Some(seeds), _) => seeds,
            (None, n) => (1..=n.unwrap_or(DEFAULT_REPLICAS) as u64).collect(),
        };
        if seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let data = DataSpec::take(&mut kv, base)?;

        let variants = match (&axis, values) {
            (None, None) => {
                let mut kv = kv;
                let v = Variant::take("base".into(), &mut kv)?;
                kv.finish()?;
                vec![v]
            }
            (Some(axis), Some(values)) => {
                if axis.starts_with("data.") || ["name", "seeds", "replicas"].contains(&axis.as_str()) || axis.starts_with("sweep.") {
                    return Err(Error::Config(format!("`{axis}` cannot be swept")));
                }
                if values.is_empty() {
                    return Err(Error::Config("sweep.values is empty".into()));
                }
                let mut out = Vec::with_capacity(values.len());
                for value in values {
                    let mut kv = kv.clone();
                    kv.set(axis, value.clone());
                    let v = Variant::take(value, &mut kv)?;
                    kv.finish()?;
                    out.push(v);
                }
                let mut labels: Vec<&str> = out.iter().map(|v| v.label.as_str()).collect();
                labels.sort_unstable();
                if labels.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::Config("sweep.values must be distinct".into()));
                }
                out
            }
            _ => return Err(Error::Config("sweep.axis and sweep.values go together".into())),
        };
        Ok(ExperimentSpec {
            name,
            axis,
            variants,
            seeds,
            data,
            text: text.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Converged,
    Diverged,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Converged => "ok",
            RunStatus::Diverged => "diverged",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub status: RunStatus,
    /// Test BLEU of the best checkpoint under the configured beam.
    pub test_bleu: Option<f64>,
    /// Validation BLEU of the best checkpoint.
    pub val_bleu: Option<f64>,
    /// Validation perplexity at the last checkpoint.
    pub final_ppl: Option<f64>,
    pub params: usize,
    pub best_step: Option<u64>,
    /// Excluded from `results.csv`, which must be reproducible.
    pub wall_seconds: f64,
}

pub const RESULTS_HEADER: [&str; 8] = ["variant", "seed", "status", "test_bleu", "val_bleu", "final_ppl", "params", "best_step"];

/// Directory of one replica inside an experiment directory.
pub fn run_dir(out: &Path, variant: &str, seed: u64) -> PathBuf {
    let safe: String = variant
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    out.join(safe).join(format!("seed-{seed}"))
}

/// Train one replica and score its best checkpoint on the test set. Files go
/// under `dir`.
pub fn run_replica<T: Real>(variant: &Variant, data: &Dataset, seed: u64, dir: &Path) -> Result<RunResult> {
    let started = Instant::now();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("model.cfg"), variant.model.render())?;
    data.vocab.write(&dir.join("vocab.tsv"))?;
    let params_count = count_parameters(&variant.model);
    let (model, params) = Seq2Seq::build::<T>(&variant.model, seed)?;
    let train = TrainConfig {
        seed,
        ..variant.train.clone()
    };
    let renderer_data = data.clone();
    let mut trainer = Trainer::new(model.clone(), params, train)?.with_renderer(Box::new(move |ids| renderer_data.render(ids)));
    let mut result = RunResult {
        variant: variant.label.clone(),
        seed,
        status: RunStatus::Diverged,
        test_bleu: None,
        val_bleu: None,
        final_ppl: None,
        params: params_count,
        best_step: None,
        wall_seconds: 0.0,
    };
    let report = match trainer.run(&data.train, &data.valid, Some(dir)) {
        Ok(r) => r,
        Err(Error::Diverged { step, loss }) => {
            std::fs::write(dir.join("DIVERGED"), format!("step {step}: loss {loss}\n"))?;
            result.wall_seconds = started.elapsed().as_secs_f64();
            return Ok(result);
        }
        Err(e) => return Err(e),
    };
    let outputs = translate_corpus(&model, &report.best_params, &data.test.sources, Search::Beam(variant.beam), Exec::Sequential)?;
    let hyps: Vec<String> = outputs.iter().map(|o| data.render(o.best.output())).collect();
    let refs: Vec<String> = data.test.targets.iter().map(|t| data.render(t)).collect();
    std::fs::write(dir.join("test_hyp.txt"), hyps.iter().map(|h| format!("{h}\n")).collect::<String>())?;
    let bleu = corpus_bleu_with(&hyps, &refs, Exec::Sequential)?;
    result.status = RunStatus::Converged;
    result.test_bleu = Some(bleu.bleu);
    result.val_bleu = Some(report.best.val_bleu);
    result.final_ppl = report.log.last().map(|r| r.val_ppl);
    result.best_step = Some(report.best.step);
    result.wall_seconds = started.elapsed().as_secs_f64();
    Ok(result)
}

/// Run every (variant, seed) pair with at most `jobs` in flight, then write
/// `results.csv`, `timings.csv`, `report.md` and `report.csv` under `out`.
pub fn run_experiment<T: Real>(spec: &ExperimentSpec, out: &Path, jobs: usize, exec: Exec) -> Result<Vec<RunResult>> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("experiment.cfg"), &spec.text)?;
    let datasets = spec
        .variants
        .iter()
        .map(|v| Dataset::load(&spec.data, v.model.vocab_size))
        .collect::<Result<Vec<_>>>()?;
    let mut variants = spec.variants.clone();
    for (v, d) in variants.iter_mut().zip(&datasets) {
        if matches!(spec.data, DataSpec::Files { .. }) {
            v.model.vocab_size = d.vocab.len();
        }
    }
    let work: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = exec
        .map_jobs(jobs, &work, |&(v, seed)| {
            run_replica::<T>(&variants[v], &datasets[v], seed, &run_dir(out, &variants[v].label, seed))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    write_results(&out.join("results.csv"), &results)?;
    let mut timings = csv::Writer::from_path(out.join("timings.csv"))?;
    timings.write_record(["variant", "seed", "wall_seconds"])?;
    for r in &results {
        timings.write_record([r.variant.clone(), r.seed.to_string(), format!("{:.3}", r.wall_seconds)])?;
    }
    timings.flush()?;

    // The report is built from the file just written so that `report`
    // regenerates it exactly.
    let reread = read_results(&out.join("results.csv"))?;
    let rows = aggregate_rows(&reread)?;
    let axis = spec.axis.as_deref().unwrap_or("variant");
    std::fs::write(out.join("report.md"), render_markdown(&spec.name, axis, &rows))?;
    write_report_csv(&out.join("report.csv"), &rows)?;
    Ok(results)
}

fn opt<V: ToString>(v: Option<V>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

pub fn write_results(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in results {
        w.write_record([
            r.variant.clone(),
            r.seed.to_string(),
            r.status.to_string(),
            opt(r.test_bleu),
            opt(r.val_bleu),
            opt(r.final_ppl),
            r.params.to_string(),
            opt(r.best_step),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<RunResult>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header {}", RESULTS_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg,
        };
        let field = |j: usize| rec.get(j).unwrap_or("");
        fn parse<V: std::str::FromStr>(s: &str) -> std::result::Result<Option<V>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| format!("bad value `{s}`"))
            }
        }
        let status = match field(2) {
            "ok" => RunStatus::Converged,
            "diverged" => RunStatus::Diverged,
            other => return Err(err(format!("bad status `{other}`"))),
        };
        out.push(RunResult {
            variant: field(0).to_string(),
            seed: parse(field(1)).map_err(err)?.ok_or_else(|| err("missing seed".into()))?,
            status,
            test_bleu: parse(field(3)).map_err(err)?,
            val_bleu: parse(field(4)).map_err(err)?,
            final_ppl: parse(field(5)).map_err(err)?,
            params: parse(field(6)).map_err(err)?.ok_or_else(|| err("missing params".into()))?,
            best_step: parse(field(7)).map_err(err)?,
            wall_seconds: 0.0,
        });
    }
    Ok(out)
}

/// One table row: a variant and its converged replicas.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    /// `None` when no replica converged.
    pub bleu: Option<Aggregate>,
    pub params: usize,
    pub converged: usize,
    pub replicas: usize,
}

impl ReportRow {
    pub fn cell(&self) -> String {
        let agg = self.bleu.as_ref().map_or("n/a".to_string(), Aggregate::to_string);
        if self.converged == self.replicas {
            agg
        } else {
            format!("{agg} [{}/{} converged]", self.converged, self.replicas)
        }
    }
}

/// Rows in order of first appearance of each variant.
pub fn aggregate_rows(results: &[RunResult]) -> Result<Vec<ReportRow>> {
    if results.is_empty() {
        return Err(Error::Empty("results"));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.variant.as_str()) {
            order.push(&r.variant);
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let runs: Vec<&RunResult> = results.iter().filter(|r| r.variant == variant).collect();
            let scores: Vec<f64> = runs
                .iter()
                .filter(|r| r.status == RunStatus::Converged)
                .filter_map(|r| r.test_bleu)
                .collect();
            Ok(ReportRow {
                variant: variant.to_string(),
                bleu: if scores.is_empty() { None } else { Some(Aggregate::new(&scores)?) },
                params: runs[0].params,
                converged: scores.len(),
                replicas: runs.len(),
            })
        })
        .collect()
}

pub fn render_markdown(title: &str, axis: &str, rows: &[ReportRow]) -> String {
    let mut s = format!("# {title}\n\nTest BLEU: mean ± sample std (max) over replicas.\n\n");
    s.push_str(&format!("| {axis} | BLEU | Params |\n|---|---|---|\n"));
    for r in rows {
        s.push_str(&format!("| {} | {} | {} |\n", r.variant, r.cell(), r.params));
    }
    s
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "bleu", "mean", "std", "max", "params", "converged", "replicas"])?;
    for r in rows {
        let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.2}"));
        w.write_record([
            r.variant.clone(),
            r.cell(),
            f(r.bleu.as_ref().map(|a| a.mean)),
            f(r.bleu.as_ref().map(|a| a.std)),
            f(r.bleu.as_ref().map(|a| a.max)),
            r.params.to_string(),
            r.converged.to_string(),
            r.replicas.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_format() {
        let a = Aggregate::new(&[21.50, 21.66, 21.40, 21.44]).unwrap();
        assert_eq!(a.to_string(), "21.50 ± 0.11 (21.66)");
        assert_eq!(Aggregate::new(&[17.0]).unwrap().to_string(), "17.00 ± 0.00 (17.00)");
        assert_eq!(Aggregate::new(&[3.0, 3.0, 3.0]).unwrap().std, 0.0);
        assert!(Aggregate::new(&[]).is_err());
    }

    fn spec(text: &str) -> Result<ExperimentSpec> {
        ExperimentSpec::parse(text, Path::new("/tmp/exp.cfg"))
    }

    #[test]
    fn variants_differ_only_on_the_axis() {
        let s = spec("data.task: copy\nvocab.size: 20\nsweep.axis: attention.type\nsweep.values: mul,none-input\nseeds: 3,4\n").unwrap();
        assert_eq!(s.name, "exp");
        assert_eq!(s.seeds, vec![3, 4]);
        assert_eq!(s.variants.len(), 2);
        let mut b = s.variants[1].clone();
        b.model.attention.kind = s.variants[0].model.attention.kind;
        b.label = s.variants[0].label.clone();
        assert_eq!(b, s.variants[0]);
    }

    #[test]
    fn experiment_errors() {
        assert!(spec("data.task: copy\nbogus: 1\n").is_err());
        assert!(spec("data.task: copy\nsweep.axis: data.seed\nsweep.values: 1,2\n").is_err());
        assert!(spec("data.task: copy\nsweep.axis: decoder.depth\n").is_err());
        assert!(spec("data.task: copy\nseeds: 1,1\n").is_err());
        assert!(spec("data.task: copy\nsweep.axis: no.such\nsweep.values: 1\n").is_err());
        assert!(spec("vocab.size: 20\n").is_err());
        assert_eq!(spec("data.task: copy\n").unwrap().seeds, vec![1, 2, 3, 4]);
    }

    fn result(variant: &str, seed: u64, bleu: Option<f64>) -> RunResult {
        RunResult {
            variant: variant.into(),
            seed,
            status: if bleu.is_some() { RunStatus::Converged } else { RunStatus::Diverged },
            test_bleu: bleu,
            val_bleu: bleu,
            final_ppl: bleu.map(|_| 1.25),
            params: 1000,
            best_step: bleu.map(|_| 500),
            wall_seconds: 3.0,
        }
    }

    #[test]
    fn report_rows_and_markdown() {
        let results = vec![
            result("mul", 1, Some(21.50)),
            result("mul", 2, Some(21.66)),
            result("mul", 3, Some(21.40)),
            result("mul", 4, Some(21.44)),
            result("add", 1, Some(20.0)),
            result("add", 2, None),
        ];
        let rows = aggregate_rows(&results).unwrap();
        assert_eq!(rows[0].cell(), "21.50 ± 0.11 (21.66)");
        assert_eq!(rows[1].cell(), "20.00 ± 0.00 (20.00) [1/2 converged]");
        let md = render_markdown("t", "attention.type", &rows);
        assert_eq!(md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| attention")).count(), 2);
        assert!(md.contains("| mul | 21.50 ± 0.11 (21.66) | 1000 |"));
    }

    #[test]
    fn results_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let results = vec![result("a b", 1, Some(12.345678901234)), result("a b", 2, None)];
        write_results(&path, &results).unwrap();
        let back = read_results(&path).unwrap();
        let mut expected = results.clone();
        expected.iter_mut().for_each(|r| r.wall_seconds = 0.0);
        assert_eq!(back, expected);

        let rows = aggregate_rows(&back).unwrap();
        let csv_path = dir.path().join("report.csv");
        write_report_csv(&csv_path, &rows).unwrap();
        let mut rdr = csv::Reader::from_path(&csv_path).unwrap();
        let rec = rdr.records().next().unwrap().unwrap();
        assert_eq!(rec[2].parse::<f64>().unwrap(), 12.35);
    }
}
