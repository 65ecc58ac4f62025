use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn lupet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lupet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("LUPET_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = lupet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
d_model = 8
heads = 2
d_ff = 16
conv_kernel = 3
n_enc_layers = 4
stage_layers = [1, 2, 3, 4]
n_dec_layers = 1
n_experts = 2
mlm_start_epoch = 0

[quantizer]
n_codes = 8
d_code = 4

[train]
epochs = 2
batch_size = 4
warmup_steps = 2
best_k = 2
beam = 2
"#;

#[test]
fn generate_defaults_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["generate", "--out", s(&a), "--counts", "28,6,6"]);
    ok(&["generate", "--out", s(&b), "--counts", "28,6,6"]);
    assert_eq!(sha(&a.join("manifest.jsonl")), sha(&b.join("manifest.jsonl")));
    let info: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("corpus.json")).unwrap()).unwrap();
    assert_eq!(info["languages"].as_array().unwrap().len(), 3);
    let manifest = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    let train_lids: Vec<u64> = manifest
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["split"] == "train")
        .map(|v| v["lid"].as_u64().unwrap())
        .collect();
    let per: Vec<usize> = (0..3).map(|l| train_lids.iter().filter(|&&x| x == l).count()).collect();
    assert_eq!(per, vec![20, 6, 2]);
}

#[test]
fn invalid_specs_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = lupet(&["generate", "--out", s(dir.path()), "--weights", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = lupet(&["generate", "--out", s(dir.path()), "--overlap", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = lupet(&["inspect", "--checkpoint", "x", "--data", "y", "--what", "nope", "--out", "z"]);
    assert_eq!(out.status.code(), Some(2));
    let out = lupet(&["train", "--data", s(dir.path()), "--out", s(dir.path()), "--preset", "nope"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn missing_files_are_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let out = lupet(&[
        "decode",
        "--checkpoint",
        s(&missing),
        "--data",
        s(dir.path()),
        "--out",
        s(&dir.path().join("h.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_decode_score_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    ok(&["generate", "--out", s(&data), "--counts", "12,6,6"]);
    ok(&["train", "--data", s(&data), "--out", s(&run), "--preset", "lupet", "--config", s(&cfg), "--seed", "3"]);
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# lupet-metrics v1\nepoch,step,l_attn,l_ctc,l_lid,l_mlm,l_ipa,total,dev_wer\n"));
    assert_eq!(metrics.lines().count(), 4);
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists());

    let h1 = dir.path().join("h1.jsonl");
    let h2 = dir.path().join("h2.jsonl");
    for h in [&h1, &h2] {
        ok(&["decode", "--checkpoint", s(&ckpt), "--data", s(&data), "--mode", "ctc_greedy", "--out", s(h)]);
    }
    assert_eq!(fs::read(&h1).unwrap(), fs::read(&h2).unwrap());
    assert_eq!(fs::read_to_string(&h1).unwrap().lines().count(), 6);

    let greedy = dir.path().join("g.jsonl");
    let beam1 = dir.path().join("b1.jsonl");
    ok(&["decode", "--checkpoint", s(&ckpt), "--data", s(&data), "--mode", "attention_beam", "--beam", "1", "--out", s(&greedy)]);
    ok(&["decode", "--checkpoint", s(&ckpt), "--data", s(&data), "--mode", "attention_beam", "--beam", "1", "--out", s(&beam1)]);
    assert_eq!(fs::read(&greedy).unwrap(), fs::read(&beam1).unwrap());

    let report = dir.path().join("report");
    ok(&["score", "--hyp", s(&h1), "--ref", s(&data), "--out", s(&report), "--groups", "high=latn;low=grek,cyrl", "--exclude", "cyrl"]);
    let csv = fs::read_to_string(report.with_extension("csv")).unwrap();
    assert!(csv.starts_with("language,S,D,I,N,rate\n"));
    assert_eq!(csv.lines().count(), 4);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.with_extension("json")).unwrap()).unwrap();
    for k in ["avg", "avg_high", "avg_low", "avg_wo_cyrl"] {
        assert!(json["aggregates"][k].is_number(), "{k}");
    }

    let router = dir.path().join("router.csv");
    ok(&["inspect", "--checkpoint", s(&ckpt), "--data", s(&data), "--what", "router", "--out", s(&router)]);
    let text = fs::read_to_string(&router).unwrap();
    for line in text.lines().skip(1) {
        let sum: f64 = line.split(',').skip(2).map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6, "{line}");
    }
    let lid = dir.path().join("lid.csv");
    ok(&["inspect", "--checkpoint", s(&ckpt), "--data", s(&data), "--what", "lid", "--out", s(&lid)]);
    assert_eq!(fs::read_to_string(&lid).unwrap().lines().count(), 4);
    let codes = dir.path().join("codes.csv");
    ok(&["inspect", "--checkpoint", s(&ckpt), "--data", s(&data), "--what", "codebook", "--out", s(&codes)]);
    assert_eq!(fs::read_to_string(&codes).unwrap().lines().count(), 9);

    // Resuming a finished run changes nothing.
    let before = fs::read(run.join("metrics.csv")).unwrap();
    ok(&["train", "--data", s(&data), "--out", s(&run), "--preset", "lupet", "--config", s(&cfg), "--seed", "3", "--resume"]);
    assert_eq!(fs::read(run.join("metrics.csv")).unwrap(), before);
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["generate", "--out", s(&data), "--counts", "6,3,3"]);
    let out = Command::new(env!("CARGO_BIN_EXE_lupet"))
        .args(["train", "--data", s(&data), "--out", s(&dir.path().join("r")), "--preset", "vanilla", "--epochs", "1"])
        .env("LUPET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
