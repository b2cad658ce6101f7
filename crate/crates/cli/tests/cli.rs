use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "synthetic": {"n_rois": 8, "n_per_class": 12, "planted_edges": 4},
  "train": {"epochs": 2, "batch_size": 8,
            "model": {"encoder": {"hidden": 8, "layers": 2, "pool_dim": 4}, "gen_hidden": 8}},
  "eval": {"folds": 3},
  "explain": {"top_k": 5}
}"#;

fn brainib(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainib"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, SMALL).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_dataset_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("data");
    let o = brainib(&["gen", "--config", s(&cfg), "--seed", "5", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["manifest.json", "truth_mask.csv", "run_config.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_dir(out.join("subjects")).unwrap().count(), 24);
}

#[test]
fn gen_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert!(brainib(&["gen", "--config", s(&cfg), "--seed", "11", "--out", s(d)]).status.success());
    }
    let read = |d: &Path| fs::read(d.join("subjects").join("sub_0003.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(fs::read(a.join("truth_mask.csv")).unwrap(), fs::read(b.join("truth_mask.csv")).unwrap());
}

#[test]
fn mi_is_symmetric() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    fs::write(&a, "0,1\n1,0\n2,2\n0.5,3\n-1,1\n").unwrap();
    fs::write(&b, "1\n0\n3\n2\n-2\n").unwrap();
    let ab = brainib(&["mi", "--a", s(&a), "--b", s(&b)]);
    let ba = brainib(&["mi", "--a", s(&b), "--b", s(&a)]);
    assert!(ab.status.success(), "{}", String::from_utf8_lossy(&ab.stderr));
    let parse = |o: &Output| String::from_utf8_lossy(&o.stdout).trim().parse::<f64>().unwrap();
    let (x, y) = (parse(&ab), parse(&ba));
    assert!((x - y).abs() < 1e-9 && x >= -1e-9, "{x} vs {y}");
}

#[test]
fn selftest_passes() {
    let o = brainib(&["selftest", "--seed", "3"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("[PASS]")), "{stdout}");
}

#[test]
fn validation_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"mi_weight": -0.5}}"#).unwrap();
    let o = brainib(&["selftest", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mi_weight"));

    fs::write(&bad, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    assert_eq!(brainib(&["selftest", "--config", s(&bad)]).status.code(), Some(1));
    assert_eq!(brainib(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(brainib(&["train", "--no-such-flag"]).status.code(), Some(1));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.csv");
    let o = brainib(&["mi", "--a", s(&missing), "--b", s(&missing)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_explain_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    let o = brainib(&["train", "--config", s(&cfg), "--seed", "1", "--out", s(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,loss_total,loss_ce,loss_con,mi_bits,acc_train,acc_val,lr");
    assert_eq!(log.lines().count(), 3);

    // same seed, same bytes
    let again = tmp.path().join("again");
    assert!(brainib(&["train", "--config", s(&cfg), "--seed", "1", "--out", s(&again)]).status.success());
    assert_eq!(
        fs::read(run.join("checkpoint.json")).unwrap(),
        fs::read(again.join("checkpoint.json")).unwrap()
    );

    let ev = tmp.path().join("eval");
    let o = brainib(&["eval", "--config", s(&cfg), "--seed", "1", "--out", s(&ev)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(ev.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 4);
    assert!(ev.join("report.json").exists() && ev.join("split_plan.json").exists());

    let ex = tmp.path().join("explain");
    let ckpt = run.join("checkpoint.json");
    let o = brainib(&["explain", "--config", s(&cfg), "--seed", "1", "--checkpoint", s(&ckpt), "--out", s(&ex)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_dir(ex.join("masks")).unwrap().count(), 24);
    let edges = fs::read_to_string(ex.join("dominant_edges_patient.csv")).unwrap();
    assert_eq!(edges.lines().count(), 6);
    assert!(!ex.join("system_auc_patient.csv").exists());

    let map = tmp.path().join("systems.csv");
    let rows: String = (0..8).map(|i| format!("{i},sys{}\n", i % 3)).collect();
    fs::write(&map, rows).unwrap();
    let ex2 = tmp.path().join("explain2");
    let o = brainib(&[
        "explain", "--config", s(&cfg), "--seed", "1", "--checkpoint", s(&ckpt),
        "--system-map", s(&map), "--out", s(&ex2),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let auc = fs::read_to_string(ex2.join("system_auc_control.csv")).unwrap();
    assert_eq!(auc.lines().count(), 4);

    // a checkpoint for 8 ROIs cannot explain a 10-ROI dataset
    let other = tmp.path().join("other.json");
    fs::write(&other, r#"{"synthetic": {"n_rois": 10, "n_per_class": 4, "planted_edges": 4}}"#).unwrap();
    let o = brainib(&["explain", "--config", s(&other), "--checkpoint", s(&ckpt), "--out", s(&ex)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_output_does_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (one, three) = (tmp.path().join("one"), tmp.path().join("three"));
    for (dir, threads) in [(&one, "1"), (&three, "3")] {
        let o = brainib(&["eval", "--config", s(&cfg), "--seed", "2", "--threads", threads, "--out", s(dir)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(one.join("report.json")).unwrap(), fs::read(three.join("report.json")).unwrap());
}
