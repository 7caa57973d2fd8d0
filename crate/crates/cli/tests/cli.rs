use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_moe-disentangle"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn gen(dir: &Path, prefix: &str, count: &str) {
    ok(
        dir,
        &[
            "gen-data",
            "--kind",
            "linear",
            "--k",
            "16",
            "--f",
            "64",
            "--n",
            "4",
            "--count",
            count,
            "--seed",
            "7",
            "--out-prefix",
            prefix,
        ],
    );
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const SMALL_TRAIN: &str = r#"{"steps": 40, "dataset_size": 80, "learning_rate": 0.001}"#;

/// gen-data, fit-sbv and a short training run in `dir`.
fn pipeline(dir: &Path) {
    gen(dir, "d", "1500");
    ok(dir, &["fit-sbv", "--dataset", "d.jsonl", "--out", "sbv.ckpt"]);
    fs::write(dir.join("cfg.json"), SMALL_TRAIN).unwrap();
    ok(
        dir,
        &[
            "train",
            "--config",
            "cfg.json",
            "--generator",
            "d.generator.ckpt",
            "--sbv",
            "sbv.ckpt",
            "--out",
            "m.ckpt",
            "--log",
            "log.jsonl",
            "--seed",
            "3",
        ],
    );
}

#[test]
fn zero_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen-data", "--count", "0", "--out-prefix", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--count"));
    assert!(!dir.path().join("x.jsonl").exists());
}

#[test]
fn invalid_sizes_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen-data", "--k", "4", "--n", "8", "--count", "10", "--out-prefix", "x"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(dir.path(), &["gen-data", "--kind", "conv", "--count", "10", "--out-prefix", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_flags_are_rejected_and_help_documents_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["train", "--bogus"]).status.code(), Some(2));
    let help = String::from_utf8(ok(dir.path(), &["train", "--help"]).stdout).unwrap();
    for flag in ["--config", "--generator", "--sbv", "--out", "--log", "--seed"] {
        assert!(help.contains(flag), "train help lacks {flag}");
    }
    let help = String::from_utf8(ok(dir.path(), &["gen-data", "--help"]).stdout).unwrap();
    for flag in ["--kind", "--k", "--f", "--n", "--count", "--seed", "--out-prefix"] {
        assert!(help.contains(flag), "gen-data help lacks {flag}");
    }
}

#[test]
fn gen_data_is_deterministic_and_manifested() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "a", "200");
    gen(dir.path(), "b", "200");
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_eq!(read("a.generator.ckpt"), read("b.generator.ckpt"));
    assert_eq!(String::from_utf8(read("a.jsonl")).unwrap().lines().count(), 200);

    let m = read_json(&dir.path().join("a.manifest.json"));
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 7);
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 2);
    for o in outputs {
        assert_eq!(o["sha256"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn full_pipeline_runs_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    assert_eq!(fs::read_to_string(d.join("log.jsonl")).unwrap().lines().count(), 40);
    let first = fs::read(d.join("m.ckpt")).unwrap();
    ok(
        d,
        &[
            "train",
            "--config",
            "cfg.json",
            "--generator",
            "d.generator.ckpt",
            "--sbv",
            "sbv.ckpt",
            "--out",
            "m2.ckpt",
            "--seed",
            "3",
        ],
    );
    assert_eq!(first, fs::read(d.join("m2.ckpt")).unwrap());

    ok(
        d,
        &[
            "eval",
            "--model",
            "m.ckpt",
            "--generator",
            "d.generator.ckpt",
            "--sbv",
            "sbv.ckpt",
            "--dataset",
            "d.jsonl",
            "--xi",
            "auto",
            "--report",
            "r.json",
        ],
    );
    let r = read_json(&d.join("r.json"));
    assert_eq!(r["samples"], 1500);
    assert_eq!(r["aa"].as_array().unwrap().len(), 4);
    assert!(d.join("r.json.manifest.json").exists());
    ok(
        d,
        &[
            "eval",
            "--model",
            "m.ckpt",
            "--generator",
            "d.generator.ckpt",
            "--sbv",
            "sbv.ckpt",
            "--dataset",
            "d.jsonl",
            "--xi",
            "auto",
            "--report",
            "r2.json",
        ],
    );
    assert_eq!(fs::read(d.join("r.json")).unwrap(), fs::read(d.join("r2.json")).unwrap());

    let out = ok(
        d,
        &[
            "edit",
            "--model",
            "m.ckpt",
            "--generator",
            "d.generator.ckpt",
            "--dataset",
            "d.jsonl",
            "--z-index",
            "5",
            "--attr",
            "2",
            "--xi",
            "-1.5",
        ],
    );
    let e: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(e["edited"].as_array().unwrap().len(), 64);
    assert_eq!(e["z"].as_array().unwrap().len(), 16);

    let out = run(
        d,
        &[
            "edit",
            "--model",
            "m.ckpt",
            "--generator",
            "d.generator.ckpt",
            "--dataset",
            "d.jsonl",
            "--z-index",
            "5",
            "--attr",
            "9",
            "--xi",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn edit_from_file_with_zero_step_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    let z: Vec<f64> = (0..16).map(|i| (i as f64 - 8.0) / 5.0).collect();
    fs::write(d.join("z.json"), serde_json::to_string(&z).unwrap()).unwrap();
    ok(
        d,
        &[
            "edit",
            "--model",
            "m.ckpt",
            "--generator",
            "d.generator.ckpt",
            "--z-file",
            "z.json",
            "--attr",
            "0",
            "--xi",
            "0",
            "--out",
            "e.json",
        ],
    );
    let e = read_json(&d.join("e.json"));
    assert_eq!(e["edited"], e["original"]);
    assert!(d.join("e.json.manifest.json").exists());

    fs::write(d.join("short.json"), "[1.0, 2.0]").unwrap();
    let out = run(
        d,
        &[
            "edit",
            "--model",
            "m.ckpt",
            "--generator",
            "d.generator.ckpt",
            "--z-file",
            "short.json",
            "--attr",
            "0",
            "--xi",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_writes_a_table_and_rejects_an_empty_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);
    ok(
        d,
        &[
            "ablate",
            "--config",
            "cfg.json",
            "--generator",
            "d.generator.ckpt",
            "--sbv",
            "sbv.ckpt",
            "--dataset",
            "d.jsonl",
            "--variants",
            "full,no-ppa",
            "--r-temps",
            "0.5,1",
            "--xi",
            "2",
            "--out",
            "ab.json",
            "--csv",
            "ab.csv",
        ],
    );
    let rows = read_json(&d.join("ab.json"));
    assert_eq!(rows.as_array().unwrap().len(), 4);
    assert_eq!(rows[0]["variant"], "full");
    assert_eq!(fs::read_to_string(d.join("ab.csv")).unwrap().lines().count(), 5);
    assert!(d.join("ab.json.manifest.json").exists());

    for empty in [["--r-temps", ""], ["--variants", ""]] {
        let mut args = vec![
            "ablate",
            "--generator",
            "d.generator.ckpt",
            "--sbv",
            "sbv.ckpt",
            "--dataset",
            "d.jsonl",
            "--out",
            "x.json",
        ];
        args.extend(empty);
        let out = run(d, &args);
        assert_eq!(out.status.code(), Some(2), "{empty:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn missing_inputs_fail_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["fit-sbv", "--dataset", "nope.jsonl", "--out", "s.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
}

#[test]
fn thread_cap_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(dir.path())
        .env("MOE_DISENTANGLE_THREADS", "0")
        .args(["gen-data", "--count", "5", "--out-prefix", "t"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .current_dir(dir.path())
        .env("MOE_DISENTANGLE_THREADS", "1")
        .args(["gen-data", "--count", "5", "--out-prefix", "t"])
        .output()
        .unwrap();
    assert!(out.status.success());
}
