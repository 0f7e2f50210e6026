use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tcca::cli::{RunConfigFile, CHECKPOINT_FILE, METRICS_CSV, METRICS_JSON, TRAIN_LOG_FILE};
use tcca::training::checkpoint::Checkpoint;

fn tcca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcca")).args(args).env("TCCA_THREADS", "2").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn small_config(dir: &Path, edit: impl FnOnce(&mut RunConfigFile)) -> PathBuf {
    let mut cfg = RunConfigFile::default();
    cfg.generator.n_train = 12;
    cfg.generator.n_test = 4;
    cfg.encoder.hidden_dim = 16;
    cfg.decoder.hidden_dim = 16;
    cfg.decoder.layers = 1;
    cfg.train.epochs = 2;
    cfg.train.warmup_epochs = 1;
    edit(&mut cfg);
    let path = dir.join(format!("config{}.json", fs::read_dir(dir).unwrap().count()));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates data and trains once; returns (root, data dir, run dir).
fn trained(edit: impl FnOnce(&mut RunConfigFile)) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let root = tempfile::tempdir().unwrap();
    let config = small_config(root.path(), edit);
    let (data, run) = (root.path().join("data"), root.path().join("run"));
    assert_eq!(code(&tcca(&["gen", "--config", s(&config), "--out", s(&data)])), 0);
    let out = tcca(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (root, data, run)
}

#[test]
fn usage_errors_exit_2() {
    let out = tcca(&["gen", "--out", "/tmp/x"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&tcca(&["gen", "--config", "/nonexistent.json", "--out", "/tmp/x"])), 2);
    let root = tempfile::tempdir().unwrap();
    let bad = root.path().join("bad.json");
    fs::write(&bad, r#"{"train":{"learning_rat":1}}"#).unwrap();
    assert_eq!(code(&tcca(&["gen", "--config", s(&bad), "--out", s(&root.path().join("d"))])), 2);
    let config = small_config(root.path(), |_| {});
    let blocker = root.path().join("file");
    fs::write(&blocker, "").unwrap();
    assert_eq!(code(&tcca(&["gen", "--config", s(&config), "--out", s(&blocker.join("sub"))])), 2);
}

#[test]
fn help_lists_defaults() {
    let out = tcca(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("\"learning_rate\": 0.001") && text.contains("TCCA_THREADS"));
}

#[test]
fn gen_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let config = small_config(root.path(), |_| {});
    let a = tcca(&["gen", "--config", s(&config), "--out", s(&root.path().join("a"))]);
    let b = tcca(&["gen", "--config", s(&config), "--out", s(&root.path().join("b"))]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8_lossy(&a.stdout).trim().len(), 64);
    assert_eq!(fs::read_dir(root.path().join("a/train")).unwrap().count(), 2 * 12);
}

#[test]
fn default_fixture_has_300_train_and_60_test_videos() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("c.json");
    fs::write(&config, "{}").unwrap();
    let data = root.path().join("data");
    assert_eq!(code(&tcca(&["gen", "--config", s(&config), "--out", s(&data)])), 0);
    let manifest = tcca::datagen::read_manifest(&data).unwrap();
    assert_eq!((manifest.train.len(), manifest.test.len()), (300, 60));
}

#[test]
fn train_eval_round_trip() {
    let (root, data, run) = trained(|_| {});
    let log = fs::read_to_string(run.join(TRAIN_LOG_FILE)).unwrap();
    assert!(log.starts_with("epoch,term,value\n0,seg,"));
    let (e1, e2) = (root.path().join("e1"), root.path().join("e2"));
    let ck = run.join(CHECKPOINT_FILE);
    let out = tcca(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&e1)]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("MoC"));
    assert_eq!(code(&tcca(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&e2)])), 0);
    let csv = fs::read_to_string(e1.join(METRICS_CSV)).unwrap();
    assert_eq!(csv, fs::read_to_string(e2.join(METRICS_CSV)).unwrap());
    // 2 alphas x 4 betas plus 5 segmentation rows and the header.
    assert_eq!(csv.lines().count(), 14);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(e1.join(METRICS_JSON)).unwrap()).unwrap();
    assert!(json["moc"].is_array());
}

#[test]
fn incompatible_checkpoints_exit_4() {
    let (root, data, run) = trained(|_| {});
    let ck_path = run.join(CHECKPOINT_FILE);
    let mut ck = Checkpoint::load(&ck_path).unwrap();
    ck.meta.config_hash = "0".repeat(64);
    let tampered = root.path().join("tampered.tcca");
    ck.save(&tampered).unwrap();
    let out = root.path().join("e");
    assert_eq!(code(&tcca(&["eval", "--checkpoint", s(&tampered), "--data", s(&data), "--out", s(&out)])), 4);

    let other = root.path().join("other");
    let config = small_config(root.path(), |c| c.generator.classes = 5);
    assert_eq!(code(&tcca(&["gen", "--config", s(&config), "--out", s(&other)])), 0);
    assert_eq!(code(&tcca(&["eval", "--checkpoint", s(&ck_path), "--data", s(&other), "--out", s(&out)])), 4);
}

#[test]
fn diverging_training_exits_3() {
    let root = tempfile::tempdir().unwrap();
    let config = small_config(root.path(), |c| {
        c.train.learning_rate = 1e300;
        c.train.warmup_epochs = 0;
        c.train.epochs = 3;
    });
    let data = root.path().join("data");
    assert_eq!(code(&tcca(&["gen", "--config", s(&config), "--out", s(&data)])), 0);
    let out = tcca(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&root.path().join("run"))]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn export_matrix_outputs() {
    let (root, _, run) = trained(|_| {});
    let (_keep, _, run_pre) = trained(|c| c.crf.init_mode = tcca::crf::InitMode::Precomputed);
    let out = root.path().join("m");
    let ck = run.join(CHECKPOINT_FILE);
    let res = tcca(&["export-matrix", "--checkpoint", s(&ck), "--out", s(&out)]);
    assert_eq!(code(&res), 0);
    let csv = fs::read_to_string(out.join("transitions.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 11);
    assert!(rows.iter().all(|r| r.split(',').count() == 1 + 11));
    let svg = fs::read_to_string(out.join("transitions.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("rect")).count(), 11 * 11);

    let both = root.path().join("both");
    let pre = run_pre.join(CHECKPOINT_FILE);
    let res = tcca(&["export-matrix", "--checkpoint", s(&ck), "--checkpoint", s(&pre), "--out", s(&both)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stdout).contains("row-argmax agreement"));
    assert!(both.join("transitions_1.svg").exists());
}

#[test]
fn export_without_crf_exits_5() {
    let (root, _, run) = trained(|c| c.train.use_crf = false);
    let res = tcca(&["export-matrix", "--checkpoint", s(&run.join(CHECKPOINT_FILE)), "--out", s(&root.path().join("m"))]);
    assert_eq!(code(&res), 5);
}

#[test]
fn ablate_grid() {
    let root = tempfile::tempdir().unwrap();
    let config = small_config(root.path(), |c| c.train.epochs = 1);
    let data = root.path().join("data");
    assert_eq!(code(&tcca(&["gen", "--config", s(&config), "--out", s(&data)])), 0);

    let grid = root.path().join("grid.json");
    fs::write(&grid, r#"{"use_crf": [true, false]}"#).unwrap();
    let out = root.path().join("ablate.csv");
    let res = tcca(&["ablate", "--config", s(&config), "--data", s(&data), "--grid", s(&grid), "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("use_crf,metric,alpha,beta,value\n"));
    // One evaluation has 13 rows.
    assert_eq!(csv.lines().count(), 1 + 2 * 13);
    assert_eq!(csv.lines().filter(|l| l.starts_with("false,")).count(), 13);

    fs::write(&grid, r#"{"use_gpu": [true]}"#).unwrap();
    let res = tcca(&["ablate", "--config", s(&config), "--data", s(&data), "--grid", s(&grid), "--out", s(&out)]);
    assert_eq!(code(&res), 2);
}
