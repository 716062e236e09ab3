use std::path::Path;
use std::process::{Command, Output};

fn s2s(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2s"))
        .args(args)
        .env("S2S_PRECISION", "f32")
        .output()
        .expect("spawn s2s")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
name: cli smoke
data.task: copy
data.train_pairs: 64
data.valid_pairs: 8
data.test_pairs: 8
data.min_len: 2
data.max_len: 5
vocab.size: 12
embedding.dim: 8
model.units: 16
attention.dim: 16
train.batch_size: 16
train.max_steps: 30
train.checkpoint_every: 15
train.lr: 0.005
beam.width: 2
seeds: 7
";

#[test]
fn bleu_of_identical_files_is_100() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("a.txt");
    std::fs::write(&f, "a b c d e f\ng h i j k\n").unwrap();
    let out = s2s(&["bleu", "--hyp", p(&f), "--ref", p(&f)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("BLEU = 100.00"));
}

#[test]
fn bleu_line_count_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::write(&a, "x y\nz\n").unwrap();
    std::fs::write(&b, "x y\n").unwrap();
    let out = s2s(&["bleu", "--hyp", p(&a), "--ref", p(&b)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let out = s2s(&["bleu", "--hypothesis", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--hypothesis"), "{err}");
    assert!(err.contains("--help"), "{err}");

    assert_eq!(s2s(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(s2s(&["decode", "--beam", "0", "--model", "m", "--input", "i", "--out", "o"]).status.code(), Some(1));
    assert_eq!(s2s(&["decode", "--alpha", "-1", "--model", "m", "--input", "i", "--out", "o"]).status.code(), Some(1));

    let help = s2s(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("sweep"));
    assert_eq!(s2s(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn misspelled_subcommand_gets_a_suggestion() {
    let out = s2s(&["swep"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep"));
}

#[test]
fn bpe_learn_and_apply_round_trip_inside_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let text = "the lower newest widest\nlow lower lowest\nnew newer newest\n";
    let input = dir.path().join("train.txt");
    std::fs::write(&input, text).unwrap();
    let out = dir.path().join("bpe");
    let seg = dir.path().join("seg");
    assert!(s2s(&["bpe-learn", "--input", p(&input), "--merges", "20", "--out", p(&out)]).status.success());
    let merges = out.join("merges.txt");
    assert!(merges.exists() && out.join("vocab.tsv").exists());
    assert!(s2s(&["bpe-apply", "--merges", p(&merges), "--input", p(&input), "--out", p(&seg)]).status.success());
    let segmented = std::fs::read_to_string(seg.join("train.txt")).unwrap();
    let joined: String = segmented
        .lines()
        .map(|l| l.replace("@@ ", ""))
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(joined, text);

    let mut entries: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    entries.sort();
    assert_eq!(entries, ["bpe", "seg", "train.txt"]);
}

#[test]
fn bpe_apply_refuses_to_overwrite_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("t.txt");
    std::fs::write(&input, "aa bb\n").unwrap();
    let bpe = dir.path().join("bpe");
    assert!(s2s(&["bpe-learn", "--input", p(&input), "--merges", "2", "--out", p(&bpe)]).status.success());
    let out = s2s(&["bpe-apply", "--merges", p(&bpe.join("merges.txt")), "--input", p(&input), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(std::fs::read_to_string(&input).unwrap(), "aa bb\n");
}

#[test]
fn train_then_decode_beam_one_matches_greedy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let model = dir.path().join("model");
    let out = s2s(&["train", "--config", p(&cfg), "--out", p(&model)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.cfg", "vocab.tsv", "best.s2s", "train_log.csv", "test_hyp.txt"] {
        assert!(model.join(f).exists(), "missing {f}");
    }

    let src = dir.path().join("src.txt");
    std::fs::write(&src, "w4 w5 w6\nw7 w8\n\nw9 w10 w11 w4\n").unwrap();
    let (greedy, beam) = (dir.path().join("greedy"), dir.path().join("beam"));
    let g = s2s(&["decode", "--model", p(&model), "--input", p(&src), "--greedy", "--out", p(&greedy)]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let b = s2s(&[
        "decode", "--model", p(&model), "--input", p(&src), "--beam", "1", "--nbest", "--sequential", "--out", p(&beam),
    ]);
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    let gh = std::fs::read(greedy.join("hyp.txt")).unwrap();
    assert_eq!(gh, std::fs::read(beam.join("hyp.txt")).unwrap());
    assert_eq!(String::from_utf8(gh).unwrap().lines().count(), 4);
    let nbest = std::fs::read_to_string(beam.join("nbest.txt")).unwrap();
    assert_eq!(nbest.lines().count(), 3);
    assert!(nbest.lines().all(|l| l.split(" ||| ").count() == 4));
}

#[test]
fn train_rejects_ambiguous_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("swept.cfg");
    std::fs::write(&cfg, format!("{TINY}sweep.axis: attention.type\nsweep.values: mul,add\n")).unwrap();
    let out = s2s(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--variant"));
}

#[test]
fn decode_with_missing_model_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src.txt");
    std::fs::write(&src, "w4\n").unwrap();
    let out = s2s(&["decode", "--model", p(&dir.path().join("nope")), "--input", p(&src), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_report_has_a_row_per_variant_and_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.cfg");
    let text = TINY.replace("seeds: 7\n", "seeds: 1,2\ntrain.max_steps: 20\n").replace("train.max_steps: 30\n", "");
    std::fs::write(&cfg, format!("{text}sweep.axis: attention.type\nsweep.values: mul,add,none-state\n")).unwrap();
    let out = dir.path().join("out");
    let run = s2s(&["sweep", "--config", p(&cfg), "--jobs", "2", "--out", p(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let md = std::fs::read_to_string(out.join("report.md")).unwrap();
    for label in ["mul", "add", "none-state"] {
        assert_eq!(md.lines().filter(|l| l.starts_with(&format!("| {label} "))).count(), 1, "{md}");
    }
    assert!(out.join("timings.csv").exists());

    let again = dir.path().join("again");
    let rep = s2s(&[
        "report", "--results", p(&out.join("results.csv")), "--title", "cli smoke", "--axis", "attention.type", "--out", p(&again),
    ]);
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    assert_eq!(md, std::fs::read_to_string(again.join("report.md")).unwrap());
    assert_eq!(
        std::fs::read(out.join("report.csv")).unwrap(),
        std::fs::read(again.join("report.csv")).unwrap()
    );
}
