use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ser_core::data::read_manifest;
use ser_core::features::read_feature_cache;
use ser_core::tensor::DIFFERENTIABLE_OPS;

const TINY: &str = "[features]
target_frames = 32
[model]
d_model = 16
n_heads = 2
n_encoder_layers = 1
d_ff = 32
conv_channels = 4,8,8
[train]
lr0 = 0.003
max_epochs = 20
[paths]
manifest = data/manifest.csv
";

fn ser(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ser"))
        .args(args)
        .current_dir(dir)
        .env_remove("SER_CONFIG")
        .output()
        .expect("spawn ser")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(&o), stderr(&o));
    o
}

/// Synthetic corpus plus the tiny config, featurized.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(ser(dir.path(), &["synth", "--out", "data", "--n-per-class", "4", "--seed", "7"]));
    std::fs::write(dir.path().join("tiny.ini"), TINY).unwrap();
    ok(ser(dir.path(), &["featurize", "--config", "tiny.ini"]));
    dir
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn synth_writes_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    ok(ser(dir.path(), &["synth", "--out", "a", "--n-per-class", "4", "--seed", "7"]));
    ok(ser(dir.path(), &["synth", "--out", "b", "--n-per-class", "4", "--seed", "7"]));
    let m = read_manifest(&dir.path().join("a/manifest.csv")).unwrap();
    assert_eq!(m.len(), 16);
    for e in &m {
        let a = std::fs::read(dir.path().join("a").join(&e.path)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&e.path)).unwrap();
        assert_eq!(a, b, "{}", e.path);
    }
    assert_eq!(read(dir.path().join("a/manifest.csv")).lines().next(), Some("path,label"));
}

#[test]
fn featurize_default_shapes_and_warm_cache() {
    let dir = tempfile::tempdir().unwrap();
    ok(ser(dir.path(), &["synth", "--out", "data", "--n-per-class", "4", "--seed", "7"]));
    let out = ok(ser(dir.path(), &["featurize", "--manifest", "data/manifest.csv"]));
    assert!(stdout(&out).contains("featurized 16 file(s), 0 up to date"), "{}", stdout(&out));
    let cached: Vec<PathBuf> = std::fs::read_dir(dir.path().join("cache"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".wav.serfeat"))
        .collect();
    assert_eq!(cached.len(), 16);
    for p in &cached {
        let fm = read_feature_cache(p).unwrap();
        assert_eq!((fm.n_mels(), fm.n_frames()), (128, 300));
    }
    let out = ok(ser(dir.path(), &["featurize", "--manifest", "data/manifest.csv"]));
    assert!(stdout(&out).contains("featurized 0 file(s), 16 up to date"), "{}", stdout(&out));
}

#[test]
fn featurize_reports_missing_file() {
    let dir = workspace();
    let manifest = dir.path().join("data/manifest.csv");
    let mut text = read(&manifest);
    text.push_str("ghost.wav,anger\n");
    std::fs::write(&manifest, text).unwrap();
    let out = ser(dir.path(), &["featurize", "--config", "tiny.ini"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("ghost.wav"), "{}", stderr(&out));
}

#[test]
fn train_writes_artifacts_reproducibly() {
    let dir = workspace();
    ok(ser(dir.path(), &["train", "--config", "tiny.ini", "--seed", "1", "--run-dir", "r1"]));
    ok(ser(dir.path(), &["train", "--config", "tiny.ini", "--seed", "1", "--run-dir", "r2"]));
    for f in ["best.ckpt", "last.ckpt", "train_log.csv", "config.ini"] {
        assert!(dir.path().join("r1").join(f).exists(), "{f}");
    }
    let log = read(dir.path().join("r1/train_log.csv"));
    assert_eq!(log.lines().next(), Some("epoch,lr,train_loss,train_acc,val_loss,val_acc"));
    assert!((1..=20).contains(&(log.lines().count() - 1)));
    assert_eq!(log, read(dir.path().join("r2/train_log.csv")));
    assert_eq!(
        std::fs::read(dir.path().join("r1/best.ckpt")).unwrap(),
        std::fs::read(dir.path().join("r2/best.ckpt")).unwrap()
    );
}

#[test]
fn train_without_cache_names_featurize() {
    let dir = tempfile::tempdir().unwrap();
    ok(ser(dir.path(), &["synth", "--out", "data", "--n-per-class", "4"]));
    std::fs::write(dir.path().join("tiny.ini"), TINY).unwrap();
    let out = ser(dir.path(), &["train", "--config", "tiny.ini"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("featurize"), "{}", stderr(&out));
}

#[test]
fn eval_on_memorized_train_split() {
    let dir = workspace();
    ok(ser(
        dir.path(),
        &[
            "train", "--config", "tiny.ini", "--set", "model.dropout=0", "--set", "train.patience=100",
            "--max-epochs", "60",
        ],
    ));
    ok(ser(
        dir.path(),
        &["eval", "--config", "tiny.ini", "--split", "train", "--checkpoint", "run/last.ckpt"],
    ));
    let report: serde_json::Value = serde_json::from_str(&read(dir.path().join("reports/report.json"))).unwrap();
    assert_eq!(report["accuracy"], 1.0);
    assert_eq!(report["n_samples"], 8);
    assert_eq!(report["macro"]["f1"], 1.0);
    let total: u64 = report["confusion"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 8);
    let preds = read(dir.path().join("reports/predictions.csv"));
    assert_eq!(preds.lines().next(), Some("path,true,pred,p_anger,p_happiness,p_sadness,p_neutral"));
    assert_eq!(preds.lines().count(), 9);
    assert!(read(dir.path().join("reports/confusion.csv")).starts_with("true\\pred,anger,happiness,sadness,neutral\n"));

    // Evaluating twice gives identical reports.
    let first = read(dir.path().join("reports/report.json"));
    ok(ser(
        dir.path(),
        &["eval", "--config", "tiny.ini", "--split", "train", "--checkpoint", "run/last.ckpt"],
    ));
    assert_eq!(first, read(dir.path().join("reports/report.json")));
}

#[test]
fn eval_with_mismatched_architecture_names_tensor() {
    let dir = workspace();
    ok(ser(dir.path(), &["train", "--config", "tiny.ini", "--max-epochs", "1"]));
    let out = ser(dir.path(), &["eval", "--config", "tiny.ini", "--set", "model.d_ff=64"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("enc0.ff1.weight"), "{}", stderr(&out));
}

#[test]
fn predict_prints_distribution() {
    let dir = workspace();
    ok(ser(dir.path(), &["train", "--config", "tiny.ini", "--max-epochs", "2"]));
    let run = || {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ser"));
        cmd.args(["predict", "data/sadness_001.wav"]).current_dir(dir.path()).env("SER_CONFIG", "tiny.ini");
        ok(cmd.output().unwrap())
    };
    let a = stdout(&run());
    assert_eq!(a, stdout(&run()));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    let probs = v["probabilities"].as_object().unwrap();
    assert_eq!(probs.len(), 4);
    let sum: f64 = probs.values().map(|p| p.as_f64().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-6);
    let label = v["label"].as_str().unwrap();
    let best = probs.iter().max_by(|a, b| a.1.as_f64().unwrap().total_cmp(&b.1.as_f64().unwrap())).unwrap().0;
    assert_eq!(label, best);

    std::fs::write(dir.path().join("fake.wav"), b"this is not audio").unwrap();
    let out = ser(dir.path(), &["predict", "--config", "tiny.ini", "fake.wav"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unsupported encoding"), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_lists_every_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(ser(dir.path(), &["gradcheck"]));
    let table = stdout(&out);
    for op in DIFFERENTIABLE_OPS {
        assert!(table.lines().any(|l| l.split_whitespace().next() == Some(op)), "{op} missing:\n{table}");
    }
    assert!(table.contains("cnn_transformer"));
}

#[test]
fn gradcheck_catches_corrupted_backward() {
    let dir = tempfile::tempdir().unwrap();
    let out = ser(dir.path(), &["gradcheck", "--ops-only", "--trials", "10", "--inject-fault", "layer_norm"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("layer_norm"), "{}", stderr(&out));
    let out = ser(dir.path(), &["gradcheck", "--inject-fault", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.ini"), "[train]\nlearning_rate = 1\n").unwrap();
    let out = ser(dir.path(), &["featurize", "--config", "bad.ini"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train.learning_rate"), "{}", stderr(&out));
    let out = ser(dir.path(), &["train", "--set", "train.batch_size=1"]);
    assert_eq!(out.status.code(), Some(1));
    let out = ser(dir.path(), &["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_exits_three() {
    let dir = workspace();
    let out = ser(dir.path(), &["train", "--config", "tiny.ini", "--set", "train.lr0=1e300", "--max-epochs", "3"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
}
