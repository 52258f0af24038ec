//! End-to-end runs of the `ttm` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ttm_core::checkpoint::read_memory;
use ttm_core::train::{parse_metrics_csv, EvalMetrics};
use ttm_core::RunConfig;

fn ttm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ttm")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A short copy run written to `dir/run.json`, with outputs under `dir/out`.
fn small_config(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(configs().join("copy_tiny.json")).unwrap();
    let mut cfg = RunConfig::from_json(&text).unwrap();
    cfg.train.steps = 40;
    cfg.train.eval_interval = 20;
    cfg.train.eval_episodes = 32;
    cfg.io.output_dir = dir.join("out").display().to_string();
    let path = dir.join("run.json");
    std::fs::write(&path, cfg.to_canonical_json().unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["model"]["processor"]["heads"] = serde_json::json!(3);
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = ttm(&["train", "--config", s(&cfg)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.processor.heads"), "{err}");

    v["train"]["surprise"] = serde_json::json!(true);
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = ttm(&["gen", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("surprise"));
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = ttm(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("nope.bin")),
        "--corpus",
        s(&dir.path().join("c.jsonl")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint not found"));
}

#[test]
fn train_eval_dump_and_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("out");
    let run = ttm(&["train", "--config", s(&cfg)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["config.json", "metrics.csv", "checkpoint.bin", "eval.jsonl", "final_metrics.json"] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
    let metrics = parse_metrics_csv(&std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(metrics.iter().map(|r| r.step).collect::<Vec<_>>(), vec![20, 40]);
    let saved: RunConfig = RunConfig::from_json(&std::fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved.train.steps, 40);

    // eval on the held-out corpus reproduces the final training metric
    let final_eval: EvalMetrics =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("final_metrics.json")).unwrap()).unwrap();
    let ev = ttm(&[
        "eval",
        "--checkpoint",
        s(&out_dir.join("checkpoint.bin")),
        "--corpus",
        s(&out_dir.join("eval.jsonl")),
    ]);
    assert!(ev.status.success());
    let got: EvalMetrics = serde_json::from_slice(&ev.stdout).unwrap();
    assert_eq!(got, final_eval);
    assert_eq!(got.accuracy, metrics.last().unwrap().accuracy);

    let dump = ttm(&[
        "dump-memory",
        "--checkpoint",
        s(&out_dir.join("checkpoint.bin")),
        "--corpus",
        s(&out_dir.join("eval.jsonl")),
        "--step",
        "3",
        "--weights",
    ]);
    assert!(dump.status.success(), "{}", String::from_utf8_lossy(&dump.stderr));
    let bytes = std::fs::read(out_dir.join("memory_step3.bin")).unwrap();
    let mem = read_memory(&mut bytes.as_slice()).unwrap();
    assert_eq!(mem.shape(), &[1, saved.model.m, saved.model.d]);
    let read_w = std::fs::read_to_string(out_dir.join("read_weights_step3.csv")).unwrap();
    let rows: Vec<Vec<f64>> = read_w
        .lines()
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), saved.model.r);
    for row in &rows {
        assert_eq!(row.len(), saved.model.m + saved.model.n);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
    assert!(out_dir.join("write_weights_step3.csv").is_file());
    let bad = ttm(&[
        "dump-memory",
        "--checkpoint",
        s(&out_dir.join("checkpoint.bin")),
        "--corpus",
        s(&out_dir.join("eval.jsonl")),
        "--step",
        "9",
    ]);
    assert!(!bad.status.success());

    let plot = ttm(&["plot", "--metrics", s(&out_dir.join("metrics.csv"))]);
    assert!(plot.status.success());
    let svg = std::fs::read_to_string(out_dir.join("metrics.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
}

#[test]
fn gen_is_idempotent_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = |split: &str| {
        let o = ttm(&["gen", "--config", s(&cfg), "--split", split, "--count", "25", "--seed", "4"]);
        assert!(o.status.success());
        let path = PathBuf::from(String::from_utf8(o.stdout).unwrap().trim());
        std::fs::read_to_string(path).unwrap()
    };
    let a = run("train");
    assert_eq!(a.lines().count(), 25);
    assert_eq!(a, run("train"));
    assert_ne!(a, run("eval"));
}

#[test]
fn flops_report_is_t_independent_for_ttm() {
    let f = configs().join("flops");
    let args = |t: &str| -> Vec<String> {
        ["flops", "--t", t]
            .into_iter()
            .map(String::from)
            .chain(["ttm_transformer_n16.json", "causal_transformer_n16.json"].map(|n| f.join(n).display().to_string()))
            .collect()
    };
    let run = |t: &str| {
        let a = args(t);
        let o = ttm(&a.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(o.status.success());
        String::from_utf8(o.stdout).unwrap()
    };
    let (one, many) = (run("1"), run("1000000"));
    let row = |csv: &str, name: &str| -> Vec<String> {
        let line = csv.lines().find(|l| l.starts_with(name)).unwrap();
        line.split(',').map(String::from).collect()
    };
    assert_eq!(one.lines().next().unwrap(), "name,arch,t,read,process,write,head,total,params");
    // all columns but t agree for the bounded model
    let (a, b) = (row(&one, "ttm_transformer_n16"), row(&many, "ttm_transformer_n16"));
    assert_eq!([&a[..2], &a[3..]].concat(), [&b[..2], &b[3..]].concat());
    let total = |r: Vec<String>| r[7].parse::<u64>().unwrap();
    assert!(total(row(&many, "causal_transformer_n16")) > total(row(&one, "causal_transformer_n16")));

    let unknown = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(unknown.path(), r#"{"arch": "perceiver"}"#).unwrap();
    let o = ttm(&["flops", unknown.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("perceiver"));
}
