//! Drives the installed binary through generate, train, eval and report.

use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn dimodif(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dimodif")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("gen.cfg"), "f=20\nd0=4\nk=3\nmin_len=3\nmax_len=6\nseed=11\n").unwrap();
    std::fs::write(p.join("train.cfg"), "task=tfl\nd=8\nr=2\nl=2\nq=5\nf_max=20\nd0=4\nepochs=2\nbatch=4\n").unwrap();
    let data = p.join("data");
    let run = p.join("run");

    let (code, out, err) = dimodif(&["generate", "--config", s(&p.join("gen.cfg")), "--out", s(&data), "--train", "12", "--val", "6"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("12 train"), "{out}");

    let (code, _, err) =
        dimodif(&["train", "--config", s(&p.join("train.cfg")), "--data", s(&data), "--out", s(&run), "--quiet"]);
    assert_eq!(code, 0, "{err}");
    let ck = run.join("checkpoint.dmck");
    assert!(ck.exists());

    let preds = p.join("preds.jsonl");
    let (code, out, err) =
        dimodif(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--task", "tfl", "--json", "--predictions", s(&preds)]);
    assert_eq!(code, 0, "{err}");
    let report: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["samples"], 6);
    assert!(report["joint"].is_object() && report["visual"].is_object());
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 6);

    let (code, out, _) = dimodif(&["eval", "--checkpoint", s(&ck), "--data", s(&data.join("val")), "--task", "tfl", "--joint", "--json"]);
    assert_eq!(code, 0);
    let joint: Value = serde_json::from_str(&out).unwrap();
    assert!(joint["visual"].is_null() && joint["joint"] == report["joint"]);

    let (code, out, _) = dimodif(&["report", "--log", s(&run.join("train_log.jsonl")), "--json"]);
    assert_eq!(code, 0);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert!(v.is_array() || v.is_object());

    // same config and seed, same checkpoint
    let run2 = p.join("run2");
    assert_eq!(dimodif(&["train", "--config", s(&p.join("train.cfg")), "--data", s(&data), "--out", s(&run2), "--quiet"]).0, 0);
    assert_eq!(std::fs::read(&ck).unwrap(), std::fs::read(run2.join("checkpoint.dmck")).unwrap());
}

#[test]
fn bad_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "f=10\nmin_len=9\nmax_len=3\n").unwrap();
    let (code, _, err) = dimodif(&["generate", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_ne!(code, 0);
    assert!(!err.is_empty());
}

#[test]
fn transcripts_by_word() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.tsv");
    std::fs::write(&pairs, "the cat sat\tthe cat sat\nthe cat sat\tthe dog sat\n").unwrap();
    let (code, out, err) = dimodif(&["score-transcripts", "--pairs", s(&pairs), "--granularity", "words", "--json"]);
    assert_eq!(code, 0, "{err}");
    let v: Value = serde_json::from_str(&out).unwrap();
    let scores: Vec<f64> = v["scores"].as_array().unwrap().iter().map(|x| x["score"].as_f64().unwrap()).collect();
    // one substitution is a delete plus an insert over 6 tokens
    assert_eq!(scores, vec![0.0, 2.0 / 6.0]);
}
