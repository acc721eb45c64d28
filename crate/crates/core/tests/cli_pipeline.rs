//! Drives the `compmeta` binary through the tiny preset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use compmeta::experiment::{file_hash, hygiene};
use compmeta::retriever::load_db;
use compmeta::world::{import_jsonl, scan_novel_leaks};

fn tiny() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("presets/tiny.toml")
}

fn run(cmd: &str, config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compmeta"))
        .args([cmd, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--seed-override", "0", "--threads", "1"])
        .output()
        .expect("failed to spawn compmeta")
}

fn ok(cmd: &str, config: &Path, out: &Path) {
    let o = run(cmd, config, out);
    assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn stderr_of_failure(cmd: &str, config: &Path, out: &Path) -> String {
    let o = run(cmd, config, out);
    assert!(!o.status.success(), "{cmd} unexpectedly succeeded");
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pipeline(out: &Path) {
    for cmd in ["gen-world", "train-retriever", "build-db", "meta-train", "evaluate"] {
        ok(cmd, &tiny(), out);
    }
}

#[test]
fn full_pipeline_is_reproducible_and_checks_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    pipeline(out);
    for name in ["dataset.jsonl", "vocab.json", "encoder.ckpt", "db.bin", "model.ckpt", "meta_log.csv", "metrics.csv", "report.json"] {
        assert!(out.join(name).exists(), "missing {name}");
    }

    // Evaluation leaves the checkpoint alone and rewrites identical bytes.
    let model = file_hash(&out.join("model.ckpt")).unwrap();
    let files = ["report.json", "metrics.csv", "predictions.csv"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    ok("evaluate", &tiny(), out);
    let after: Vec<Vec<u8>> = files.iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    assert_eq!(before, after);
    assert_eq!(file_hash(&out.join("model.ckpt")).unwrap(), model);

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# provenance: {"), "{metrics}");
    assert!(metrics.contains("\"model\""));

    // The database only indexes train instances of seen pairs.
    let splits = import_jsonl(&out.join("dataset.jsonl")).unwrap();
    let (db, _) = load_db(&out.join("db.bin")).unwrap();
    assert!(hygiene(&splits, Some(&db)).clean());
    let sources: Vec<_> = db.source_instances().into_iter().map(|i| splits.train[i].clone()).collect();
    assert!(scan_novel_leaks(&sources, &splits.novel_pairs).is_empty());

    // A config edit upstream of the model makes every stored artifact stale.
    let edited = out.join("edited.toml");
    let text = fs::read_to_string(tiny()).unwrap().replace("lr = 3e-3", "lr = 2e-3");
    fs::write(&edited, text).unwrap();
    let err = stderr_of_failure("evaluate", &edited, out);
    assert!(err.contains("stale artifact encoder.ckpt"), "{err}");

    // So does editing the dataset after the fact.
    let mut data = fs::read(out.join("dataset.jsonl")).unwrap();
    data.extend_from_slice(b"\n");
    fs::write(out.join("dataset.jsonl"), data).unwrap();
    let err = stderr_of_failure("build-db", &tiny(), out);
    assert!(err.contains("stale artifact dataset.jsonl"), "{err}");
}

#[test]
fn meta_training_is_deterministic_and_keeps_the_best_validation_step() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["encoder.ckpt", "db.bin", "model.ckpt", "meta_log.csv", "metrics.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }

    // The log lists one validation row per checkpoint; the first best one is kept.
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(a.path().join("meta_log.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    let col = header.iter().position(|h| h.starts_with("val_")).expect("validation column");
    let vals: Vec<(usize, f64)> = reader
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[0] == "val")
        .map(|r| (r[1].parse().unwrap(), r[col].parse().unwrap()))
        .collect();
    assert_eq!(vals[0].0, 0, "the initial parameters are validated first");
    assert!(vals.windows(2).all(|w| w[0].0 < w[1].0));
    assert!(vals.iter().all(|(_, s)| (0.0..=1.0).contains(s)));
}

#[test]
fn missing_and_invalid_inputs_fail_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let err = stderr_of_failure("evaluate", &tiny(), dir.path());
    assert!(err.contains("vocab.json"), "{err}");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, fs::read_to_string(tiny()).unwrap().replace("k = 4", "k = -2")).unwrap();
    let err = stderr_of_failure("gen-world", &bad, dir.path());
    assert!(err.contains("retrieval.k"), "{err}");

    let unknown = dir.path().join("unknown.toml");
    fs::write(&unknown, fs::read_to_string(tiny()).unwrap().replace("[meta]", "[meta]\ninner_rate = 1.0")).unwrap();
    let err = stderr_of_failure("gen-world", &unknown, dir.path());
    assert!(err.contains("inner_rate"), "{err}");
}
