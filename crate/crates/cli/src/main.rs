//! `s2s`: subword preprocessing, training, decoding, scoring and replicated
//! sweeps for recurrent translation models.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when a command fails
//! at run time (including diverged training). Numeric precision follows
//! `S2S_PRECISION` (`f32`, the default, or `f64`).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use s2s_core::beam::{translate_corpus, BeamConfig, Search};
use s2s_core::bleu::corpus_bleu;
use s2s_core::bpe::{alphabet, debpe_line, learn_bpe, word_counts, MergeTable};
use s2s_core::checkpoint;
use s2s_core::config::{KeyValues, ModelConfig};
use s2s_core::exec::Exec;
use s2s_core::model::Seq2Seq;
use s2s_core::optim::AdamConfig;
use s2s_core::sweep::{
    aggregate_rows, read_results, render_markdown, run_experiment, run_replica, write_report_csv, DataSpec,
    Dataset, ExperimentSpec, RunStatus,
};
use s2s_core::vocab::Vocabulary;
use s2s_core::{DType, Real};

#[derive(Parser, Debug)]
#[command(name = "s2s", version, about = "Recurrent encoder-decoder translation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn BPE merges from tokenized text; writes merges.txt and vocab.tsv.
    BpeLearn(BpeLearnArgs),
    /// Segment tokenized text with learned merges.
    BpeApply(BpeApplyArgs),
    /// Train one replica of an experiment config.
    Train(TrainArgs),
    /// Translate a file with a trained model.
    Decode(DecodeArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Bleu(BleuArgs),
    /// Run every variant and seed of an experiment config and tabulate.
    Sweep(SweepArgs),
    /// Rebuild report.md and report.csv from a results.csv.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct BpeLearnArgs {
    /// Tokenized text files; source and target sides are learned jointly.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Number of merge operations.
    #[arg(long, default_value_t = 32000)]
    merges: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BpeApplyArgs {
    /// merges.txt written by bpe-learn.
    #[arg(long)]
    merges: PathBuf,
    /// Tokenized text; the segmented copy keeps the file name under --out.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Experiment config (see `sweep`); its first seed is used unless --seed is given.
    #[arg(long)]
    config: PathBuf,
    /// Row label to train when the config sweeps an axis.
    #[arg(long)]
    variant: Option<String>,
    /// Initialization, shuffling and dropout seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    /// Directory written by `train` (model.cfg, vocab.tsv, best.s2s).
    #[arg(long)]
    model: PathBuf,
    /// Checkpoint to load instead of <model>/best.s2s.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Source sentences, one per line, already tokenized.
    #[arg(long)]
    input: PathBuf,
    /// Segment the input with these merges first.
    #[arg(long)]
    bpe: Option<PathBuf>,
    /// Beam width.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..), conflicts_with = "greedy")]
    beam: u64,
    /// Length penalty exponent.
    #[arg(long, default_value_t = 0.6, value_parser = non_negative)]
    alpha: f64,
    /// Argmax decoding instead of beam search.
    #[arg(long)]
    greedy: bool,
    /// Output length cap (also limited to 2 * source length + 10).
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    max_len: u64,
    /// Also write nbest.txt as `index ||| tokens ||| logprob ||| score`.
    #[arg(long)]
    nbest: bool,
    /// Decode sentences one after another.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BleuArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replicas trained concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    /// Run replicas one after another regardless of --jobs.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// results.csv written by `sweep`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value = "Results")]
    title: String,
    /// Header of the variant column.
    #[arg(long, default_value = "variant")]
    axis: String,
    #[arg(long)]
    out: PathBuf,
}

fn non_negative(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a finite value >= 0, got {s}"))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn precision() -> Result<DType> {
    match std::env::var("S2S_PRECISION") {
        Ok(v) => v.parse().map_err(|e| anyhow::anyhow!("S2S_PRECISION: {e}")),
        Err(_) => Ok(DType::F32),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BpeLearn(a) => bpe_learn(a),
        Command::BpeApply(a) => bpe_apply(a),
        Command::Train(a) => match precision()? {
            DType::F32 => train::<f32>(a),
            DType::F64 => train::<f64>(a),
        },
        Command::Decode(a) => match precision()? {
            DType::F32 => decode::<f32>(a),
            DType::F64 => decode::<f64>(a),
        },
        Command::Bleu(a) => bleu(a),
        Command::Sweep(a) => match precision()? {
            DType::F32 => sweep::<f32>(a),
            DType::F64 => sweep::<f64>(a),
        },
        Command::Report(a) => report(a),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for l in lines {
        writeln!(out, "{l}")?;
    }
    out.flush()?;
    Ok(())
}

fn bpe_learn(a: BpeLearnArgs) -> Result<()> {
    let mut lines = Vec::new();
    for p in &a.input {
        lines.extend(read_lines(p)?);
    }
    let counts = word_counts(&lines);
    let table = learn_bpe(&counts, a.merges)?;
    std::fs::create_dir_all(&a.out)?;
    table.write(&a.out.join("merges.txt"))?;
    let vocab = table.vocabulary(alphabet(&counts).iter());
    vocab.write(&a.out.join("vocab.tsv"))?;
    println!("{} merges learned, vocabulary of {} entries", table.len(), vocab.len());
    Ok(())
}

fn bpe_apply(a: BpeApplyArgs) -> Result<()> {
    let table = MergeTable::read(&a.merges)?;
    std::fs::create_dir_all(&a.out)?;
    for input in &a.input {
        let name = input.file_name().with_context(|| format!("{} has no file name", input.display()))?;
        let target = a.out.join(name);
        if target.canonicalize().ok() == input.canonicalize().ok() {
            bail!("refusing to overwrite the input {}", input.display());
        }
        let lines = read_lines(input)?;
        let segmented = table.apply_lines(&lines, Exec::default());
        write_lines(&target, segmented.into_iter().map(|s| s.join(" ")))?;
    }
    Ok(())
}

fn train<T: Real>(a: TrainArgs) -> Result<()> {
    let spec = ExperimentSpec::read(&a.config)?;
    let variant = match (&a.variant, spec.variants.as_slice()) {
        (None, [only]) => only.clone(),
        (None, _) => bail!(
            "the config sweeps `{}`; pick one of {} with --variant",
            spec.axis.as_deref().unwrap_or("?"),
            spec.variants.iter().map(|v| v.label.as_str()).collect::<Vec<_>>().join(", ")
        ),
        (Some(label), all) => all
            .iter()
            .find(|v| &v.label == label)
            .cloned()
            .with_context(|| format!("no variant `{label}` in {}", a.config.display()))?,
    };
    let seed = a.seed.unwrap_or(spec.seeds[0]);
    let data = Dataset::load(&spec.data, variant.model.vocab_size)?;
    let mut variant = variant;
    if matches!(spec.data, DataSpec::Files { .. }) {
        variant.model.vocab_size = data.vocab.len();
    }
    let result = run_replica::<T>(&variant, &data, seed, &a.out)?;
    if result.status == RunStatus::Diverged {
        bail!(
            "training diverged (non-finite loss); see {}",
            a.out.join("DIVERGED").display()
        );
    }
    println!(
        "best checkpoint at step {}: validation BLEU {:.2}, test BLEU {:.2}, {} parameters",
        result.best_step.unwrap_or(0),
        result.val_bleu.unwrap_or(0.0),
        result.test_bleu.unwrap_or(0.0),
        result.params
    );
    Ok(())
}

fn decode<T: Real>(a: DecodeArgs) -> Result<()> {
    let cfg_path = a.model.join("model.cfg");
    let mut kv = KeyValues::read(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
    let mut cfg = ModelConfig::default();
    cfg.apply(&mut kv)?;
    kv.finish()?;
    let vocab = Vocabulary::read(&a.model.join("vocab.tsv"))?;
    let ckpt_path = a.checkpoint.clone().unwrap_or_else(|| a.model.join("best.s2s"));
    let ckpt = checkpoint::load::<T>(&ckpt_path, AdamConfig::default())
        .with_context(|| format!("loading {}", ckpt_path.display()))?;
    if ckpt.config_digest != cfg.digest() {
        bail!("{} was not written for {}", ckpt_path.display(), cfg_path.display());
    }
    let (model, mut params) = Seq2Seq::build::<T>(&cfg, 0)?;
    for (id, p) in params.clone().iter() {
        let loaded = ckpt
            .params
            .id(&p.name)
            .with_context(|| format!("checkpoint lacks parameter `{}`", p.name))?;
        let value = ckpt.params.value(loaded);
        if value.shape() != p.value.shape() {
            bail!("parameter `{}` has shape {:?}, expected {:?}", p.name, value.shape(), p.value.shape());
        }
        *params.value_mut(id) = value.clone();
    }

    let merges = a.bpe.as_deref().map(MergeTable::read).transpose()?;
    let lines = read_lines(&a.input)?;
    let sources: Vec<Vec<u32>> = lines
        .iter()
        .map(|l| match &merges {
            Some(t) => vocab.encode(t.apply_line(l).iter().map(String::as_str)),
            None => vocab.encode(l.split_whitespace()),
        })
        .collect();
    let search = if a.greedy {
        Search::Greedy { max_len: a.max_len as usize }
    } else {
        Search::Beam(BeamConfig {
            width: a.beam as usize,
            alpha: a.alpha,
            max_len: a.max_len as usize,
        })
    };
    let exec = if a.sequential { Exec::Sequential } else { Exec::Parallel };
    // Empty lines translate to empty lines.
    let nonempty: Vec<usize> = (0..sources.len()).filter(|&i| !sources[i].is_empty()).collect();
    let inputs: Vec<&[u32]> = nonempty.iter().map(|&i| sources[i].as_slice()).collect();
    let outputs = translate_corpus(&model, &params, &inputs, search, exec)?;

    std::fs::create_dir_all(&a.out)?;
    let mut hyps = vec![String::new(); sources.len()];
    let mut nbest = Vec::new();
    for (&i, out) in nonempty.iter().zip(&outputs) {
        hyps[i] = debpe_line(&vocab.decode(out.best.output()));
        for h in &out.nbest {
            nbest.push(format!("{i} ||| {} ||| {:.6} ||| {:.6}", vocab.decode(h.output()), h.logp, h.score));
        }
    }
    write_lines(&a.out.join("hyp.txt"), hyps)?;
    if a.nbest {
        write_lines(&a.out.join("nbest.txt"), nbest)?;
    }
    Ok(())
}

fn bleu(a: BleuArgs) -> Result<()> {
    let hyp = read_lines(&a.hyp)?;
    let reference = read_lines(&a.reference)?;
    println!("{}", corpus_bleu(&hyp, &reference)?);
    Ok(())
}

fn sweep<T: Real>(a: SweepArgs) -> Result<()> {
    let spec = ExperimentSpec::read(&a.config)?;
    let exec = if a.sequential { Exec::Sequential } else { Exec::Parallel };
    let results = run_experiment::<T>(&spec, &a.out, a.jobs as usize, exec)?;
    let diverged = results.iter().filter(|r| r.status == RunStatus::Diverged).count();
    print!("{}", std::fs::read_to_string(a.out.join("report.md"))?);
    if diverged > 0 {
        eprintln!("{diverged} of {} replicas diverged", results.len());
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let results = read_results(&a.results)?;
    let rows = aggregate_rows(&results)?;
    std::fs::create_dir_all(&a.out)?;
    let md = render_markdown(&a.title, &a.axis, &rows);
    std::fs::write(a.out.join("report.md"), &md)?;
    write_report_csv(&a.out.join("report.csv"), &rows)?;
    print!("{md}");
    Ok(())
}
