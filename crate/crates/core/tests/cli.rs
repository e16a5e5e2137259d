use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use topk_lab::harness::csv_body;
use topk_lab::model::{Checkpoint, ModelConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_topk-lab"));
    c.env("TOPK_LAB_THREADS", "1");
    c
}

fn run(dir: &Path, cmd: &str, cfg: &Value, extra: &[&str]) -> Output {
    let path = dir.join(format!("{cmd}.json"));
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    bin()
        .arg(cmd)
        .arg("--config")
        .arg(&path)
        .args(extra)
        .output()
        .unwrap()
}

fn model() -> Value {
    json!({
        "vocab": 32, "layers": 1, "heads": 2, "d_model": 8, "d_ff": 16,
        "max_positions": 64, "rope_theta": 10000.0, "norm_eps": 1e-6
    })
}

fn train_cfg(out: &Path, modes: Value, lr: f64, steps: usize) -> Value {
    json!({
        "experiment": "tiny",
        "seed": 3,
        "out_dir": out.to_str().unwrap(),
        "train": {
            "model": model(),
            "data": [{"task": "needle", "count": 20, "context_len": 16, "seed": 1}],
            "modes": modes,
            "seeds": [3],
            "lr": lr,
            "batch_size": 4,
            "steps": steps
        }
    })
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = train_cfg(&dir.path().join("out"), json!([{"kind": "full"}]), 0.01, 2);
    cfg["train"]["data"] = json!([]);
    cfg["train"]["dataset"] = json!(dir.path().join("nope.jsonl"));
    let o = run(dir.path(), "train", &cfg, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("nope.jsonl"));
}

#[test]
fn unknown_field_and_bad_json_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = train_cfg(&dir.path().join("out"), json!([{"kind": "full"}]), 0.01, 2);
    cfg["trian"] = json!({});
    let o = run(dir.path(), "train", &cfg, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let p = dir.path().join("broken.json");
    fs::write(&p, "{ not json").unwrap();
    let o = bin().args(["train", "--config"]).arg(&p).output().unwrap();
    assert_eq!(o.status.code(), Some(2));

    let o = bin().args(["train", "--config"]).arg(dir.path().join("absent.json")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "experiment": "s",
        "checkpoint": dir.path().join("ghost").to_str().unwrap(),
        "tasks": [{"task": "needle", "count": 2, "context_len": 16, "seed": 1}],
        "ratios": [1.0]
    });
    let o = run(dir.path(), "sweep-ratio", &cfg, &["--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn runtime_failure_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::init(
        ModelConfig { vocab: 32, layers: 1, heads: 2, d_model: 8, d_ff: 16, max_positions: 8, ..Default::default() },
        1,
    )
    .unwrap();
    ck.save(dir.path().join("short")).unwrap();
    // prompts longer than the positional budget
    let cfg = json!({
        "experiment": "s",
        "checkpoint": dir.path().join("short").to_str().unwrap(),
        "tasks": [{"task": "needle", "count": 2, "context_len": 32, "seed": 1}],
        "ratios": [1.0]
    });
    let o = run(dir.path(), "sweep-ratio", &cfg, &["--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"), "random checkpoints are flagged");
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run(dir.path(), "train", &train_cfg(&out, json!([{"kind": "full"}]), 0.0, 3), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trained = Checkpoint::load(out.join("tiny_full_seed3")).unwrap();
    let m: ModelConfig = serde_json::from_value(model()).unwrap();
    let init = Checkpoint::init(m, 3).unwrap();
    assert_eq!(trained.params, init.params);
}

#[test]
fn paired_training_emits_one_checkpoint_per_mode() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let modes = json!([{"kind": "full"}, {"kind": "topk", "ratio": 0.25}]);
    let o = run(dir.path(), "train", &train_cfg(&out, modes, 0.01, 3), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let list: Value = serde_json::from_str(&fs::read_to_string(out.join("train_checkpoints.json")).unwrap()).unwrap();
    assert_eq!(list.as_array().unwrap().len(), 2);
    let full = Checkpoint::load(out.join("tiny_full_seed3")).unwrap();
    let topk = Checkpoint::load(out.join("tiny_topk_seed3")).unwrap();
    assert_ne!(full.params, topk.params);
    let loss = fs::read_to_string(out.join("train_loss.csv")).unwrap();
    assert!(loss.starts_with("# generated unix_time="));
    assert_eq!(csv_body(&loss).lines().count(), 1 + 2 * 3);
}

#[test]
fn generated_tasks_feed_training_via_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let gen = json!({
        "experiment": "g",
        "vocab": 32,
        "tasks": [{"task": "copy", "count": 5, "context_len": 6, "seed": 9}]
    });
    let data_dir = dir.path().join("data");
    let o = run(dir.path(), "gen-tasks", &gen, &["--out", data_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let file = data_dir.join("copy_n6_seed9.jsonl");
    assert_eq!(fs::read_to_string(&file).unwrap().lines().count(), 5);

    let out = dir.path().join("out");
    let mut cfg = train_cfg(&out, json!([{"kind": "full"}]), 0.01, 2);
    cfg["train"]["data"] = json!([]);
    cfg["train"]["dataset"] = json!(file);
    let o = run(dir.path(), "train", &cfg, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn identical_models_give_an_all_zero_reduction_grid() {
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::init(serde_json::from_value(model()).unwrap(), 5).unwrap();
    let path = dir.path().join("m");
    ck.save(&path).unwrap();
    let p = path.to_str().unwrap();
    let cfg = json!({
        "experiment": "e",
        "base_checkpoint": p,
        "variant_checkpoint": p,
        "tasks": [{"task": "needle", "count": 3, "context_len": 24, "seed": 4}],
        "entropy": {"threshold": 0.0}
    });
    let out = dir.path().join("o");
    let o = run(dir.path(), "entropy-compare", &cfg, &["--out", out.to_str().unwrap(), "--capture"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let red = fs::read_to_string(out.join("entropy_reduction.csv")).unwrap();
    let rows: Vec<&str> = csv_body(&red).lines().skip(1).collect();
    assert_eq!(rows.len(), 48);
    for r in rows {
        assert_eq!(r.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 0.0, "{r}");
    }
    assert!(out.join("traces/entropy_base_needle.tkattn").exists());
    let heads: Value = serde_json::from_str(&fs::read_to_string(out.join("retrieval_heads.json")).unwrap()).unwrap();
    assert_eq!(heads["base"], heads["variant"]);
}

#[test]
fn sweeps_reproduce_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::init(serde_json::from_value(model()).unwrap(), 6).unwrap();
    ck.save(dir.path().join("m")).unwrap();
    let cfg = json!({
        "experiment": "p",
        "seed": 11,
        "checkpoint": dir.path().join("m").to_str().unwrap(),
        "tasks": [{"task": "assoc_recall", "count": 6, "context_len": 32, "seed": 2}],
        "window": 4,
        "precisions": [0.0, 0.5, 1.0]
    });
    let mut bodies = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("o{i}"));
        let o = run(dir.path(), "sweep-precision", &cfg, &["--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        bodies.push(csv_body(&fs::read_to_string(out.join("sweep_precision.csv")).unwrap()).to_string());
    }
    assert_eq!(bodies[0], bodies[1]);
    // a different experiment seed changes the random fill
    let out = dir.path().join("o2");
    let o = run(dir.path(), "sweep-precision", &cfg, &["--out", out.to_str().unwrap(), "--seed", "12"]);
    assert!(o.status.success());
    let summary = fs::read_to_string(dir.path().join("o0/sweep_precision_summary.csv")).unwrap();
    assert!(csv_body(&summary).lines().nth(1).unwrap().ends_with(",0,0"), "{summary}");
}
