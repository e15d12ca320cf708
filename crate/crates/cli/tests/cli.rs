//! End-to-end checks of the `dscl` binary: exit codes, output files and
//! seed handling.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{
  "task": {"synthetic": {"num_samples": 300, "input_dim": 4, "num_targets": 2,
                          "generator": "nonlinear-sine", "noise_std": 0.05, "seed": 1}},
  "model": {"hidden_dims": [8], "feature_dim": 8, "regressor_hidden": 8},
  "split": {"label_rate": 0.2},
  "schedule": {"init_epochs": 1, "finetune_epochs": 1, "batch_size": 8, "lr": 0.001},
  "seed": 5
}"#;

fn dscl(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dscl"));
    cmd.args(args).env_remove("DSCL_SEED").env("RUST_LOG", "off");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn with(base: &str, patch: impl FnOnce(&mut Value)) -> String {
    let mut v: Value = serde_json::from_str(base).unwrap();
    patch(&mut v);
    v.to_string()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn train_writes_every_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY);
    let out = tmp.path().join("run");
    let o = dscl(&["train", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["log.jsonl", "checkpoint.bin", "model.bin", "metrics.json", "mask.csv", "jacobian.csv", "report.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["seed"], 5);
    assert_eq!(m["per_target"].as_array().unwrap().len(), 2);
    let log = std::fs::read_to_string(out.join("log.jsonl")).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert!(kinds.contains(&"step".into()) && kinds.last().unwrap() == "epoch");
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    // Schema violation: unknown field.
    let bad = write(tmp.path(), "bad.json", &with(TINY, |v| v["bogus"] = 1.into()));
    assert_eq!(code(&dscl(&["train", bad.to_str().unwrap()], &[])), 2);
    // Semantic violation: frozen mask without an init phase.
    let no_init = write(
        tmp.path(),
        "noinit.json",
        &with(TINY, |v| v["schedule"]["init_epochs"] = 0.into()),
    );
    assert_eq!(code(&dscl(&["train", no_init.to_str().unwrap()], &[])), 2);
    // Unsupported label rate.
    let rate = write(tmp.path(), "rate.json", &with(TINY, |v| v["split"]["label_rate"] = 0.3.into()));
    assert_eq!(code(&dscl(&["train", rate.to_str().unwrap()], &[])), 2);
    // Unparseable arguments.
    assert_eq!(code(&dscl(&["train"], &[])), 2);
    // Runtime failure: the data file does not exist.
    let missing = write(
        tmp.path(),
        "missing.json",
        r#"{"task": {"tabular": {"path": "nowhere.csv", "inputs": ["a"], "targets": ["b", "c"]}}}"#,
    );
    let o = dscl(&["train", missing.to_str().unwrap(), "--out-dir", tmp.path().join("x").to_str().unwrap()], &[]);
    assert_eq!(code(&o), 1);
    // Missing checkpoint for eval.
    let csv = write(tmp.path(), "d.csv", "a,b,c\n1,2,3\n4,5,6\n");
    assert_eq!(code(&dscl(&["eval", "nope.bin", csv.to_str().unwrap()], &[])), 1);
}

#[test]
fn zero_weights_reproduce_the_supervised_baseline() {
    let tmp = TempDir::new().unwrap();
    let zero = write(
        tmp.path(),
        "zero.json",
        &with(TINY, |v| v["weights"] = serde_json::json!({"gamma": 0, "w_sc": 0, "w_uc": 0, "w_ur": 0})),
    );
    let out = tmp.path().join("zero");
    assert_eq!(code(&dscl(&["train", zero.to_str().unwrap(), "--out-dir", out.to_str().unwrap()], &[])), 0);
    let abl = tmp.path().join("abl");
    let cfg = write(tmp.path(), "c.json", TINY);
    assert_eq!(code(&dscl(&["ablate", cfg.to_str().unwrap(), "--out-dir", abl.to_str().unwrap()], &[])), 0);
    let a = json(&out.join("metrics.json"));
    let b = json(&abl.join("l_reg_only/seed-5/metrics.json"));
    for k in ["mae", "rmse", "pearson", "spearman"] {
        assert_eq!(a[k], b[k], "{k}");
    }
    let log = std::fs::read_to_string(out.join("log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["l_sc"], Value::Null);
    assert_eq!(first["l_uc"], Value::Null);
}

/// Structure of `ablation.json` with the numbers stripped.
fn skeleton(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.iter()
                .filter(|(k, _)| k.as_str() != "config_digest")
                .map(|(k, x)| {
                    let keep = matches!(k.as_str(), "variant" | "seed" | "runs") && !x.is_array();
                    (k.clone(), if keep { x.clone() } else { skeleton(x) })
                })
                .collect(),
        ),
        Value::Array(a) => Value::Array(a.iter().map(skeleton).collect()),
        Value::Number(_) => Value::String("number".into()),
        other => other.clone(),
    }
}

#[test]
fn ablate_output_matches_golden_structure() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY);
    let out = tmp.path().join("abl");
    let o = dscl(&["ablate", cfg.to_str().unwrap(), "--seeds", "1,2", "--out-dir", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let got = skeleton(&json(&out.join("ablation.json")));
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/ablation_structure.json");
    if std::env::var_os("DSCL_BLESS").is_some() {
        std::fs::write(&golden_path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    assert_eq!(got, json(&golden_path), "rerun with DSCL_BLESS=1 to accept a deliberate change");
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows[0], "variant");
    assert_eq!(rows.len(), 1 + 8 * 2);
    assert!(out.join("no_init/seed-2/metrics.json").is_file());
}

#[test]
fn sweep_reports_every_rate() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY);
    let out = tmp.path().join("sw");
    let o = dscl(
        &["sweep", cfg.to_str().unwrap(), "--rates", "0.2,1.0", "--out-dir", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "rate,seed,mae,rmse,pearson,spearman");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.2,5,") && lines[2].starts_with("1.0,5,"));
    assert_eq!(json(&out.join("sweep.json")).as_array().unwrap().len(), 2);
    assert!(out.join("rate-1/seed-5/metrics.json").is_file());
    // A rate outside the supported set is a configuration error.
    assert_eq!(code(&dscl(&["sweep", cfg.to_str().unwrap(), "--rates", "0.3"], &[])), 2);
}

#[test]
fn seed_precedence() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", TINY);
    let run = |name: &str, flag: Option<&str>, env: Option<&str>| -> Value {
        let out = tmp.path().join(name);
        let mut args = vec!["train", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
        if let Some(s) = flag {
            args.extend(["--seed", s]);
        }
        let envs: Vec<(&str, &str)> = env.map(|e| ("DSCL_SEED", e)).into_iter().collect();
        assert_eq!(code(&dscl(&args, &envs)), 0);
        json(&out.join("metrics.json"))
    };
    assert_eq!(run("a", None, None)["seed"], 5);
    assert_eq!(run("b", None, Some("9"))["seed"], 9);
    assert_eq!(run("c", Some("3"), Some("9"))["seed"], 3);
    let o = dscl(&["train", cfg.to_str().unwrap()], &[("DSCL_SEED", "x")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_scores_a_csv_with_the_saved_normalization() {
    let tmp = TempDir::new().unwrap();
    let rows: String = (0..60)
        .map(|i| {
            let x = [i as f64 / 10.0, (i % 7) as f64, ((i * 3) % 11) as f64 / 3.0];
            format!("{},{},{},{},{}\n", x[0], x[1], x[2], x[0] + 0.5 * x[1], x[2] - x[0])
        })
        .collect();
    let csv = write(tmp.path(), "d.csv", &format!("a,b,c,y1,y2\n{rows}"));
    let cfg = write(
        tmp.path(),
        "c.json",
        &with(TINY, |v| {
            v["task"] = serde_json::json!({"tabular": {"path": "d.csv", "inputs": ["a", "b", "c"], "targets": ["y1", "y2"]}});
            v["split"]["label_rate"] = 1.0.into();
        }),
    );
    let out = tmp.path().join("run");
    let o = dscl(&["train", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let model = out.join("model.bin");
    let o = dscl(&["eval", model.to_str().unwrap(), csv.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let by_position: Value = serde_json::from_slice(&o.stdout).unwrap();
    let o = dscl(
        &[
            "eval",
            model.to_str().unwrap(),
            csv.to_str().unwrap(),
            "--inputs",
            "a,b,c",
            "--targets",
            "y1,y2",
        ],
        &[],
    );
    let by_name: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(by_position, by_name);
    assert!(by_name["mae"].as_f64().unwrap().is_finite());
    // Wrong number of inputs for the checkpoint.
    let o = dscl(&["eval", model.to_str().unwrap(), csv.to_str().unwrap(), "--inputs", "a,b"], &[]);
    assert_ne!(code(&o), 0);
}

#[test]
fn demo_ambiguity_prints_the_table() {
    let o = dscl(&["demo-ambiguity"], &[]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let value = |label: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(label)).unwrap();
        line.split_whitespace().last().unwrap().parse().unwrap()
    };
    assert!(value("best scalar") <= 0.0);
    assert_eq!(value("per-subspace, y1"), 1.0);
    assert_eq!(value("per-subspace, y2"), 1.0);
}

#[test]
fn every_preset_validates() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            dscl::config::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}
