use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rcl::harness::{read_acc_matrix, DatasetKind, ExperimentConfig, RunRecord};
use rcl::trainer::{compute_metrics, Method};

fn rcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcl")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn toy_config(dir: &Path, tasks: usize) -> PathBuf {
    let mut exp = ExperimentConfig::default();
    exp.dataset.kind = DatasetKind::SplitBlobs;
    exp.dataset.tasks = tasks;
    exp.dataset.input_dim = 4;
    exp.dataset.train_per_class = 20;
    exp.dataset.val_per_class = 4;
    exp.dataset.test_per_class = 20;
    exp.model = rcl::harness::ModelConfig::Mlp { hidden: vec![8, 8] };
    exp.train.method = Method::Rcl;
    exp.train.epochs = 2;
    exp.train.rep_samples = 16;
    exp.out_dir = dir.join("run");
    let path = dir.join("toy.json");
    std::fs::write(&path, serde_json::to_string_pretty(&exp).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn single_task_run_writes_artifacts_with_null_bwt() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), 1);
    let out = rcl(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty(), "machine output belongs in files");
    let run = tmp.path().join("run");
    for f in ["run_metrics.json", "acc_matrix.csv", "checkpoint.json", "memory.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let record = RunRecord::read(&run.join("run_metrics.json")).unwrap();
    assert_eq!(record.bwt, None);
    let text = std::fs::read_to_string(run.join("run_metrics.json")).unwrap();
    let raw: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(raw["bwt"].is_null());
}

#[test]
fn eval_tools_read_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), 2);
    assert_eq!(code(&rcl(&["run", "--config", s(&cfg), "--method", "gpm"])), 0);
    let run = tmp.path().join("run");
    let ckpt = run.join("checkpoint.json");

    let record = RunRecord::read(&run.join("run_metrics.json")).unwrap();
    let matrix = read_acc_matrix(&run.join("acc_matrix.csv")).unwrap();
    let m = compute_metrics(&matrix).unwrap();
    assert_eq!((Some(m.acc), m.bwt), (record.acc, record.bwt));

    let out = rcl(&["eval-fgsm", "--checkpoint", s(&ckpt), "--mu-list", "0,0.05"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(run.join("adv_eval.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["mu", "method", "accuracy", "delta"]);
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][1], "gpm");
    let clean: f64 = rows[0][2].parse().unwrap();
    assert!((clean - record.acc.unwrap()).abs() <= 1e-9, "{clean} vs {:?}", record.acc);
    assert_eq!(rows[0][3].parse::<f64>().unwrap(), 0.0);

    let out = rcl(&["flatness", "--checkpoint", s(&ckpt), "--mode", "slice", "--directions", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(run.join("landscape.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["direction_id", "span", "loss"]);
    for rec in r.records() {
        let rec = rec.unwrap();
        rec[0].parse::<usize>().unwrap();
        assert!(rec[2].parse::<f64>().unwrap().is_finite());
    }
    assert_eq!(code(&rcl(&["flatness", "--checkpoint", s(&ckpt), "--mode", "worst"])), 0);

    let out = rcl(&["export-features", "--checkpoint", s(&ckpt), "--per-task", "10"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut r = csv::Reader::from_path(run.join("features.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["x", "y", "angle", "label", "task"]);
    for rec in r.records() {
        let rec = rec.unwrap();
        let (x, y): (f64, f64) = (rec[0].parse().unwrap(), rec[1].parse().unwrap());
        assert!((x.hypot(y) - 1.0).abs() <= 1e-9);
        assert!(rec[3].parse::<usize>().unwrap() < 4);
    }

    let out = rcl(&["gpm-inspect", "--memory", s(&run.join("memory.json"))]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("after task 1"));
}

#[test]
fn seed_range_writes_one_directory_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), 1);
    let out = rcl(&["run", "--config", s(&cfg), "--seeds", "3..5", "--ablate", "phi"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for seed in [3u64, 4] {
        let record = RunRecord::read(&tmp.path().join(format!("run/seed_{seed}/run_metrics.json"))).unwrap();
        assert_eq!(record.seed, seed);
        assert!(!record.effective.phi);
    }
}

#[test]
fn exit_codes_separate_config_and_runtime_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&rcl(&["run", "--config", "/nonexistent/cfg.json"])), 1);
    assert_eq!(code(&rcl(&["run", "--config", "x.json", "--bogus"])), 1);
    assert_eq!(code(&rcl(&["frobnicate"])), 1);
    assert_eq!(code(&rcl(&["--help"])), 0);

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"lr": -1.0}}"#).unwrap();
    let out = rcl(&["run", "--config", s(&bad)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr"));
    assert_eq!(code(&rcl(&["run", "--config", s(&toy_config(tmp.path(), 1)), "--seeds", "5..2"])), 1);

    // The output directory is an existing file, so persisting fails after training.
    let blocker = tmp.path().join("blocker");
    std::fs::write(&blocker, "").unwrap();
    let cfg = toy_config(tmp.path(), 1);
    assert_eq!(code(&rcl(&["run", "--config", s(&cfg), "--out-dir", s(&blocker)])), 2);
}
