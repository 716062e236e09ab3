//! Acceptance criteria, one PASS/FAIL line each. Runs sequentially so the
//! timed criteria are not competing with each other for cores.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use s2s_core::beam::{self, exhaustive_search, translate, BeamConfig, PrefixHashModel, Search};
use s2s_core::bleu::corpus_bleu;
use s2s_core::bpe::{alphabet, debpe, learn_bpe, word_counts};
use s2s_core::cells::{Cell, CellKind, CellSpec, CellState, ResidualMode, Stack, StackSpec};
use s2s_core::config::{AttentionType, Direction, ModelConfig};
use s2s_core::data::SyntheticTask;
use s2s_core::exec::Exec;
use s2s_core::gradcheck;
use s2s_core::model::Seq2Seq;
use s2s_core::optim::AdamConfig;
use s2s_core::sweep::{run_experiment, run_replica, Aggregate, DataSpec, Dataset, ExperimentSpec, RunStatus, Variant};
use s2s_core::train::TrainConfig;
use s2s_core::{seeded_rng, Graph, Init, NodeId, ParamStore, Result, Tensor};

type Outcome = std::result::Result<String, String>;

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("gradient oracle", gradient_oracle),
        ("beam oracle", beam_oracle),
        ("width-1 equals greedy", width_one_is_greedy),
        ("copy task", copy_task),
        ("attention ablation trend", attention_ablation),
        ("residual algebra", residual_algebra),
        ("BLEU conformance", bleu_conformance),
        ("BPE round trip", bpe_round_trip),
        ("aggregation format", aggregation_format),
        ("sweep determinism", sweep_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

/// Finite-difference check of `f` applied to random parameters of the given
/// shapes, reduced to a scalar by a fixed random weighting.
fn op_case(shapes: &[&[usize]], f: impl Fn(&mut Graph<'_, f64>, &[NodeId]) -> Result<NodeId>) -> Result<f64> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(17);
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add_init(format!("x{i}"), s, Init::Uniform(1.0), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let report = gradcheck::check(&store, 1e-5, usize::MAX, |g| {
        let inputs: Vec<NodeId> = ids.iter().map(|&id| g.param(id)).collect();
        let out = f(g, &inputs)?;
        let shape = g.shape(out).to_vec();
        let weights = Tensor::init(&shape, Init::Uniform(1.0), &mut seeded_rng(99))?;
        let w = g.constant(weights);
        let weighted = g.mul(out, w)?;
        Ok(g.sum(weighted))
    })?;
    Ok(report.max_rel_error)
}

fn cell_case(kind: CellKind) -> Result<f64> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(23);
    let cell = Cell::build(&mut store, "cell", CellSpec::new(kind, 3, 4), 0.5, &mut rng)?;
    let x = store.add_init("x", &[2, 3], Init::Uniform(1.0), &mut rng)?;
    let h = store.add_init("h0", &[2, 4], Init::Uniform(1.0), &mut rng)?;
    let c = store.add_init("c0", &[2, 4], Init::Uniform(1.0), &mut rng)?;
    let report = gradcheck::check(&store, 1e-5, usize::MAX, |g| {
        let xn = g.param(x);
        let mut state = CellState {
            h: g.param(h),
            c: (kind == CellKind::Lstm).then(|| g.param(c)),
        };
        for _ in 0..2 {
            state = cell.step(g, xn, &state)?;
        }
        let w = g.constant(Tensor::init(&[2, 4], Init::Uniform(1.0), &mut seeded_rng(5))?);
        let mut loss = g.mul(state.h, w)?;
        if let Some(cn) = state.c {
            loss = g.add(loss, cn)?;
        }
        Ok(g.sum(loss))
    })?;
    Ok(report.max_rel_error)
}

fn micro_model_case() -> Result<f64> {
    let mut cfg = ModelConfig::default();
    cfg.vocab_size = 11;
    cfg.embedding_dim = 6;
    cfg.units = 8;
    cfg.attention.dim = 8;
    cfg.dropout = 0.0;
    cfg.init_scale = 0.3;
    let (model, store) = Seq2Seq::build::<f64>(&cfg, 4)?;
    let src = vec![vec![4u32, 5, 6, 7], vec![8u32, 9, 10]];
    let tgt = vec![vec![5u32, 6, 7], vec![9u32, 10, 4, 5]];
    let report = gradcheck::check(&store, 1e-5, usize::MAX, |g| model.sequence_nll(g, &src, &tgt, None))?;
    Ok(report.max_rel_error)
}

fn gradient_oracle() -> Outcome {
    type Case = (&'static str, Box<dyn Fn() -> Result<f64>>);
    let cases: Vec<Case> = vec![
        ("matmul", Box::new(|| op_case(&[&[3, 4], &[4, 5]], |g, x| g.matmul(x[0], x[1])))),
        ("add", Box::new(|| op_case(&[&[2, 3, 4], &[4]], |g, x| g.add(x[0], x[1])))),
        ("add-general", Box::new(|| op_case(&[&[2, 1, 4], &[3, 1]], |g, x| g.add(x[0], x[1])))),
        ("sub", Box::new(|| op_case(&[&[3, 4], &[3, 4]], |g, x| g.sub(x[0], x[1])))),
        ("mul", Box::new(|| op_case(&[&[2, 3], &[3]], |g, x| g.mul(x[0], x[1])))),
        ("mul-general", Box::new(|| op_case(&[&[2, 1, 3], &[4, 1]], |g, x| g.mul(x[0], x[1])))),
        ("scale", Box::new(|| op_case(&[&[3, 4]], |g, x| Ok(g.scale(x[0], -1.7))))),
        ("one_minus", Box::new(|| op_case(&[&[3, 4]], |g, x| Ok(g.one_minus(x[0]))))),
        ("tanh", Box::new(|| op_case(&[&[3, 4]], |g, x| Ok(g.tanh(x[0]))))),
        ("sigmoid", Box::new(|| op_case(&[&[3, 4]], |g, x| Ok(g.sigmoid(x[0]))))),
        ("concat", Box::new(|| op_case(&[&[2, 3], &[2, 2]], |g, x| g.concat(&[x[0], x[1]])))),
        ("slice", Box::new(|| op_case(&[&[2, 5]], |g, x| g.slice(x[0], 1, 3)))),
        ("sum", Box::new(|| op_case(&[&[3, 4]], |g, x| Ok(g.sum(x[0]))))),
        ("mean", Box::new(|| op_case(&[&[3, 4]], |g, x| Ok(g.mean(x[0]))))),
        ("reshape", Box::new(|| op_case(&[&[2, 6]], |g, x| g.reshape(x[0], &[3, 4])))),
        ("softmax", Box::new(|| op_case(&[&[3, 4]], |g, x| Ok(g.softmax(x[0]))))),
        (
            "masked_softmax",
            Box::new(|| op_case(&[&[2, 3]], |g, x| g.masked_softmax(x[0], &[true, false, true, true, true, false]))),
        ),
        (
            "dropout",
            Box::new(|| op_case(&[&[3, 4]], |g, x| g.dropout(x[0], 0.3, Some(&mut seeded_rng(8))))),
        ),
        ("embedding", Box::new(|| op_case(&[&[6, 3]], |g, x| g.embedding(x[0], &[1, 4, 4, 0])))),
        (
            "stack_time",
            Box::new(|| op_case(&[&[2, 3], &[2, 3], &[2, 3]], |g, x| g.stack_time(&[x[0], x[1], x[2]]))),
        ),
        (
            "gather_time",
            Box::new(|| op_case(&[&[2, 3, 4]], |g, x| g.gather_time(x[0], &[2, 1, 0, 1, 1, 2]))),
        ),
        ("batched_dot", Box::new(|| op_case(&[&[2, 3, 4], &[2, 4]], |g, x| g.batched_dot(x[0], x[1])))),
        ("weighted_sum", Box::new(|| op_case(&[&[2, 3], &[2, 3, 4]], |g, x| g.weighted_sum(x[0], x[1])))),
        (
            "select_rows",
            Box::new(|| op_case(&[&[3, 2], &[3, 2]], |g, x| g.select_rows(&[true, false, true], x[0], x[1]))),
        ),
        (
            "cross_entropy",
            Box::new(|| op_case(&[&[3, 5]], |g, x| g.cross_entropy(x[0], &[4, 0, 2], &[1.0, 0.5, 0.0]))),
        ),
        ("vanilla cell", Box::new(|| cell_case(CellKind::Vanilla))),
        ("gru cell", Box::new(|| cell_case(CellKind::Gru))),
        ("lstm cell", Box::new(|| cell_case(CellKind::Lstm))),
        ("bidi+attention micro-model", Box::new(micro_model_case)),
    ];
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for (name, case) in &cases {
        let rel = case().map_err(|e| format!("{name}: {e}"))?;
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst.0 < 1e-3 && secs < 60.0,
        format!(
            "{} cases, max relative error {:.2e} ({}), {secs:.1}s (limits 1e-3, 60s)",
            cases.len(),
            worst.0,
            worst.1
        ),
    )
}

// ---------------------------------------------------------------- 2

fn beam_oracle() -> Outcome {
    let start = Instant::now();
    let width = 5usize.pow(5);
    let mut checked = 0;
    for seed in 0..25 {
        let model = PrefixHashModel::new(5, 1000 + seed);
        for alpha in [0.0, 0.6, 1.0] {
            let exact = exhaustive_search(&model, alpha, 5).map_err(err)?;
            let found = beam::beam_search(&model, &BeamConfig { width, alpha, max_len: 5 }).map_err(err)?;
            if found.best != exact[0] {
                return Err(format!(
                    "seed {seed} alpha {alpha}: beam {:?} ({}) vs exhaustive {:?} ({})",
                    found.best.tokens, found.best.score, exact[0].tokens, exact[0].score
                ));
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, format!("{checked} model/alpha pairs match exactly, width {width}, {secs:.1}s"))
}

// ---------------------------------------------------------------- 3

fn random_model(i: usize) -> Result<(Seq2Seq, ParamStore<f64>)> {
    let mut cfg = ModelConfig::default();
    cfg.vocab_size = 13;
    cfg.embedding_dim = 5;
    cfg.units = 6;
    cfg.attention.dim = 6;
    cfg.init_scale = 0.8;
    cfg.attention.kind = [AttentionType::Mul, AttentionType::Add, AttentionType::NoneState, AttentionType::NoneInput][i % 4];
    cfg.decoder.cell = [CellKind::Gru, CellKind::Lstm, CellKind::Vanilla][i % 3];
    cfg.encoder.cell = cfg.decoder.cell;
    cfg.encoder.direction = if i % 2 == 0 { Direction::Bidi } else { Direction::Uni };
    Seq2Seq::build(&cfg, 300 + i as u64)
}

fn width_one_is_greedy() -> Outcome {
    let mut rng = seeded_rng(31);
    let mut sentences = 0;
    for i in 0..20 {
        let (model, params) = random_model(i).map_err(err)?;
        let sources: Vec<Vec<u32>> = (0..4)
            .map(|_| (0..rng.gen_range(2..7)).map(|_| rng.gen_range(4..13)).collect())
            .collect();
        let render = |ids: &[u32]| ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        let batch = beam::greedy_batch(&model, &params, &sources, 12).map_err(err)?;
        for (src, batched) in sources.iter().zip(&batch) {
            let greedy = translate(&model, &params, src, Search::Greedy { max_len: 12 }).map_err(err)?;
            let beam1 = translate(&model, &params, src, Search::Beam(BeamConfig { width: 1, alpha: 0.6, max_len: 12 }))
                .map_err(err)?;
            let (g, b) = (render(greedy.best.output()), render(beam1.best.output()));
            if g != b || g != render(batched) {
                return Err(format!("model {i}: greedy `{g}` beam-1 `{b}` batched `{}`", render(batched)));
            }
            sentences += 1;
        }
    }
    Ok(format!("20 models, {sentences} sentences byte-identical"))
}

// ---------------------------------------------------------------- 4

fn desk_model(kind: AttentionType) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.vocab_size = 20;
    cfg.embedding_dim = 32;
    cfg.units = 64;
    cfg.attention.dim = 64;
    cfg.attention.kind = kind;
    cfg
}

fn copy_task() -> Outcome {
    let start = Instant::now();
    let data = Dataset::load(
        &DataSpec::Synthetic {
            task: SyntheticTask::Copy,
            train_pairs: 2000,
            valid_pairs: 200,
            test_pairs: 200,
            min_len: 5,
            max_len: 10,
            seed: 1,
        },
        20,
    )
    .map_err(err)?;
    let variant = Variant {
        label: "copy".into(),
        model: desk_model(AttentionType::Mul),
        train: TrainConfig {
            batch_size: 32,
            max_steps: 6000,
            checkpoint_every: 250,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            stop_at_bleu: Some(99.9),
            time_limit: Some(Duration::from_secs(480)),
            ..TrainConfig::default()
        },
        beam: BeamConfig::default(),
    };
    let dir = tempfile::tempdir().map_err(err)?;
    let result = run_replica::<f32>(&variant, &data, 1, dir.path()).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let bleu = result.test_bleu.unwrap_or(0.0);
    check(
        bleu >= 99.0 && secs < 600.0,
        format!(
            "test BLEU {bleu:.2} on 200 held-out pairs (best step {}), {secs:.0}s (need >= 99.0 within 600s)",
            result.best_step.unwrap_or(0)
        ),
    )
}

// ---------------------------------------------------------------- 5

const ABLATION: &str = "\
name: attention ablation on sequence reversal
data.task: reverse
data.train_pairs: 2000
data.valid_pairs: 200
data.test_pairs: 200
data.min_len: 5
data.max_len: 10
vocab.size: 20
embedding.dim: 32
model.units: 64
attention.dim: 64
train.max_steps: 2000
train.checkpoint_every: 250
train.lr: 0.002
sweep.axis: attention.type
sweep.values: mul,none-input
seeds: 1,2,3
";

fn attention_ablation() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let spec = ExperimentSpec::parse(ABLATION, &dir.path().join("ablation.cfg")).map_err(err)?;
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let results = run_experiment::<f32>(&spec, &dir.path().join("out"), jobs, Exec::Parallel).map_err(err)?;
    let mean = |label: &str| {
        let v: Vec<f64> = results
            .iter()
            .filter(|r| r.variant == label && r.status == RunStatus::Converged)
            .filter_map(|r| r.test_bleu)
            .collect();
        Aggregate::new(&v).map_err(err)
    };
    let (mul, none) = (mean("mul")?, mean("none-input")?);
    let secs = start.elapsed().as_secs_f64();
    let gap = mul.mean - none.mean;
    check(
        gap >= 10.0 && secs < 2700.0,
        format!("mul {mul} vs none-input {none}, gap {gap:.2} BLEU, {secs:.0}s (need >= 10 within 2700s)"),
    )
}

// ---------------------------------------------------------------- 6

fn residual_algebra() -> Outcome {
    let x = [0.25, -1.5, 3.0];
    for depth in 1..=6 {
        for mode in [ResidualMode::Standard, ResidualMode::Dense] {
            let mut store = ParamStore::<f64>::new();
            let spec = StackSpec::uniform(CellKind::Vanilla, 3, 3, depth, mode, 0.0);
            let stack = Stack::build(&mut store, "s", spec, 0.5, &mut seeded_rng(2)).map_err(err)?;
            for p in store.iter_mut() {
                p.value.data_mut().fill(0.0);
            }
            let mut g = Graph::new(&store);
            let input = g.constant(Tensor::from_f64(&[1, 3], &x).map_err(err)?);
            let states = stack.zero_states(&mut g, 1).map_err(err)?;
            let (out, _) = stack.step(&mut g, input, &states, None).map_err(err)?;
            let factor = match mode {
                ResidualMode::Dense => 2f64.powi(depth as i32 - 1),
                _ => 1.0,
            };
            let expected: Vec<f64> = x.iter().map(|v| v * factor).collect();
            if g.value(out) != expected.as_slice() {
                return Err(format!("{mode} depth {depth}: {:?} != {expected:?}", g.value(out)));
            }
        }
    }
    Ok("standard stacks are the identity and dense stacks scale by 2^(l-1) exactly for depths 1..=6".into())
}

// ---------------------------------------------------------------- 7

fn bleu_conformance() -> Outcome {
    // Clipped matches / candidates per order, summed by hand over the pairs:
    // 1-grams 37/44, 2-grams 23/34, 3-grams 14/25, 4-grams 8/17;
    // c = 44, r = 49, BP = exp(1 - 49/44).
    let pairs = [
        ("the cat sat on the mat", "the cat sat on the mat"),
        ("a quick brown fox", "the quick brown fox jumps"),
        ("i like green eggs and ham", "i do not like green eggs and ham"),
        ("it is raining today", "today it is raining"),
        ("hello world", "goodbye moon"),
        ("the the the the", "the cat sat down"),
        ("we will meet at noon tomorrow", "we will meet tomorrow at noon"),
        ("one two three four five six", "one two three four five six seven"),
        ("x", "x y z"),
        ("dogs bark loudly at night", "dogs bark at night"),
    ];
    let hyp: Vec<&str> = pairs.iter().map(|p| p.0).collect();
    let refs: Vec<&str> = pairs.iter().map(|p| p.1).collect();
    let r = corpus_bleu(&hyp, &refs).map_err(err)?;
    let expected = 55.53990328136647;
    let bp = (1.0f64 - 49.0 / 44.0).exp();
    if (r.bleu - expected).abs() >= 0.01 || (r.brevity_penalty - bp).abs() > 1e-12 {
        return Err(format!("fixture: got {r}, expected BLEU {expected:.4} BP {bp:.6}"));
    }
    let hand = [37.0 / 44.0, 23.0 / 34.0, 14.0 / 25.0, 8.0 / 17.0];
    if r.precisions.iter().zip(hand).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(format!("precisions {:?} != {hand:?}", r.precisions));
    }
    // No 4-gram matches anywhere: BLEU is exactly zero.
    let zero = corpus_bleu(&["a b c x", "d e"], &["a b c d", "d e"]).map_err(err)?;
    if zero.bleu != 0.0 || zero.precisions[3] != 0.0 {
        return Err(format!("zero-precision case: {zero}"));
    }
    // Perfect precisions, four of five reference tokens.
    let short = corpus_bleu(&["a b c d"], &["a b c d e"]).map_err(err)?;
    if (short.bleu - 100.0 * (-0.25f64).exp()).abs() >= 0.01 {
        return Err(format!("brevity case: {short}"));
    }
    Ok(format!("fixture {:.4} vs hand {expected:.4}; zero-precision 0; brevity {:.2}", r.bleu, short.bleu))
}

// ---------------------------------------------------------------- 8

fn bpe_round_trip() -> Outcome {
    let mut rng = seeded_rng(77);
    let letters: Vec<char> = "abcdefghijklmnop".chars().collect();
    let words: Vec<String> = (0..10_000)
        .map(|_| (0..rng.gen_range(1..9)).map(|_| letters[rng.gen_range(0..letters.len())]).collect())
        .collect();
    let lines: Vec<String> = words.chunks(10).map(|c| c.join(" ")).collect();
    let counts = word_counts(&lines);
    let chars = alphabet(&counts);
    let table = learn_bpe(&counts, 200).map_err(err)?;
    for w in &words {
        let segmented = table.apply(w);
        let back = debpe(&segmented);
        if back != [w.clone()] {
            return Err(format!("`{w}` -> {segmented:?} -> {back:?}"));
        }
    }
    let mut sizes = Vec::new();
    for n in [0, 50, 100, 200] {
        let t = learn_bpe(&counts, n).map_err(err)?;
        sizes.push(t.vocabulary(chars.iter()).len());
    }
    check(
        sizes.windows(2).all(|w| w[0] <= w[1]),
        format!("10000 words round-trip with {} merges; vocabulary sizes {sizes:?}", table.len()),
    )
}

// ---------------------------------------------------------------- 9

fn aggregation_format() -> Outcome {
    let rendered = Aggregate::new(&[21.50, 21.66, 21.40, 21.44]).map_err(err)?.to_string();
    check(rendered == "21.50 ± 0.11 (21.66)", format!("`{rendered}`"))
}

// ---------------------------------------------------------------- 10

const TINY_SWEEP: &str = "\
name: determinism
data.task: copy
data.train_pairs: 64
data.valid_pairs: 16
data.test_pairs: 16
data.min_len: 2
data.max_len: 5
vocab.size: 12
embedding.dim: 8
model.units: 16
attention.dim: 16
train.batch_size: 16
train.max_steps: 40
train.checkpoint_every: 20
train.lr: 0.005
beam.width: 3
sweep.axis: attention.type
sweep.values: mul,add
seeds: 1,2
";

fn sweep_once(root: &Path, name: &str) -> Result<Vec<u8>> {
    let spec = ExperimentSpec::parse(TINY_SWEEP, &root.join("tiny.cfg"))?;
    let out = root.join(name);
    run_experiment::<f32>(&spec, &out, 2, Exec::Parallel)?;
    Ok(std::fs::read(out.join("results.csv"))?)
}

fn sweep_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let a = sweep_once(dir.path(), "a").map_err(err)?;
    let b = sweep_once(dir.path(), "b").map_err(err)?;
    check(
        a == b,
        format!("two sweeps, {} bytes of results.csv, identical: {}", a.len(), a == b),
    )
}
