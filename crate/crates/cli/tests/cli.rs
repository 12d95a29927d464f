use std::path::Path;
use std::process::{Command, Output};

fn xaqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xaqa"))
        .args(args)
        .env("XAQA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_GEN: [&str; 4] = ["--vocab-size", "40", "--count", "30"];
const SMALL_MODEL: [&str; 12] = [
    "--model-vocab-size",
    "40",
    "--d-model",
    "16",
    "--n-heads",
    "2",
    "--n-enc-layers",
    "1",
    "--n-dec-layers",
    "1",
    "--d-ff",
    "32",
];

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        let out = xaqa(&[&["--seed", "7", "gen-data", "--out", s(p)][..], &SMALL_GEN].concat());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let c = dir.path().join("c.jsonl");
    xaqa(&[&["--seed", "8", "gen-data", "--out", s(&c)][..], &SMALL_GEN].concat());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn lambda_outside_unit_interval_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    xaqa(&[&["gen-data", "--out", s(&data)][..], &SMALL_GEN].concat());
    let out = xaqa(&["train", "--lambda", "1.5", "--train", s(&data), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
}

#[test]
fn eval_without_checkpoint_names_the_flag() {
    let out = xaqa(&["eval", "--data", "x.jsonl", "--report", "r.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let out = xaqa(&["gen-data", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    let help = xaqa(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn dumped_config_parses_back_to_itself() {
    let dir = tempfile::tempdir().unwrap();
    let out = xaqa(&["--seed", "11", "--dump-config", "train", "--lambda", "0.3", "--strategy", "most_likely", "--max-steps", "9"]);
    assert!(out.status.success());
    let first = String::from_utf8(out.stdout).unwrap();
    assert!(first.contains("lambda = 0.3"));
    let file = dir.path().join("run.toml");
    std::fs::write(&file, &first).unwrap();
    let again = xaqa(&["--config", s(&file), "--dump-config", "train"]);
    assert_eq!(String::from_utf8(again.stdout).unwrap(), first);

    // flags win over the file
    let over = xaqa(&["--config", s(&file), "--dump-config", "train", "--lambda", "0.7"]);
    assert!(String::from_utf8(over.stdout).unwrap().contains("lambda = 0.7"));
}

fn pipeline(dir: &Path) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let train = dir.join("train.jsonl");
    let dev = dir.join("dev.jsonl");
    let run = dir.join("run");
    let report = dir.join("report.txt");
    let ok = |o: Output| assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    ok(xaqa(&[&["--seed", "3", "gen-data", "--out", s(&train)][..], &SMALL_GEN].concat()));
    ok(xaqa(&["--seed", "4", "gen-data", "--out", s(&dev), "--vocab-size", "40", "--count", "8"]));
    ok(xaqa(
        &[
            &["--seed", "5", "train", "--train", s(&train), "--dev", s(&dev), "--out-dir", s(&run), "--max-steps", "3", "--batch-size", "8"][..],
            &SMALL_MODEL,
        ]
        .concat(),
    ));
    let ckpt = run.join("last.xaqa");
    ok(xaqa(&["eval", "--checkpoint", s(&ckpt), "--data", s(&dev), "--report", s(&report)]));
    (
        std::fs::read(&train).unwrap(),
        std::fs::read(run.join("metrics.jsonl")).unwrap(),
        std::fs::read(&report).unwrap(),
    )
}

#[test]
fn full_pipeline_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    assert_eq!(ra, rb);
    let text = String::from_utf8(ra.2).unwrap();
    assert!(text.contains("== answers"));
    assert!(text.contains("== hallucination"));

    let rr = a.path().join("rerank.txt");
    let out = xaqa(&["rerank-eval", "--checkpoint", s(&a.path().join("run/last.xaqa")), "--data", s(&a.path().join("dev.jsonl")), "--report", s(&rr)]);
    assert!(out.status.success());
    assert!(std::fs::read_to_string(&rr).unwrap().contains("== reranking"));
    assert!(a.path().join("rerank.jsonl").exists());

    let stem = a.path().join("heat");
    let out = xaqa(&["visualize", "--checkpoint", s(&a.path().join("run/last.xaqa")), "--data", s(&a.path().join("dev.jsonl")), "--index", "1", "--out", s(&stem)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read(a.path().join("heat.pgm")).unwrap().starts_with(b"P5\n"));
    assert!(a.path().join("heat.txt").exists());
}

#[test]
fn unwritable_heatmap_path_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let ckpt = dir.path().join("run/last.xaqa");
    let dev = dir.path().join("dev.jsonl");
    let out = xaqa(&["visualize", "--checkpoint", s(&ckpt), "--data", s(&dev), "--out", s(&dir.path().join("nope/heat"))]);
    assert_eq!(out.status.code(), Some(2));
}
