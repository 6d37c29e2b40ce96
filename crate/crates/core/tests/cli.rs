use std::path::Path;
use std::process::{Command, Output};

use asd_core::dataio::{scan_corpus, Split};
use asd_core::model::Model;
use asd_core::pipeline::{load_model, TRAIN_LOG_FILE};

const ASD: &str = env!("CARGO_BIN_EXE_asd");

fn run(args: &[&str]) -> Output {
    Command::new(ASD).args(args).output().expect("asd binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "asd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two IDs, two 1 s training clips per ID, one normal and one anomalous
/// test clip per ID.
fn tiny_corpus(root: &Path) {
    ok(&[
        "synth",
        "--out",
        s(root),
        "--set",
        "num_ids=2",
        "--set",
        "train_clips_per_id=2",
        "--set",
        "test_normal_per_id=1",
        "--set",
        "test_anomaly_per_id=1",
        "--set",
        "duration_s=1",
    ]);
}

#[test]
fn missing_paths_and_bad_keys_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = run(&["train", "--corpus", s(&missing), "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
    let out = run(&["eval", "--scores", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["featurize", "--corpus", s(dir.path()), "--set", "learning_rate=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn synth_writes_requested_ids() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let report = scan_corpus(dir.path()).unwrap();
    assert!(report.warnings.is_empty());
    assert_eq!(report.select("synth", Split::Train).len(), 4);
    assert_eq!(report.select("synth", Split::Test).len(), 4);
    assert_eq!(report.id_vocabulary("synth"), vec!["id_00", "id_01"]);
}

#[test]
fn featurize_rerun_reuses_cache() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path());
    let first = ok(&["featurize", "--corpus", s(dir.path())]);
    assert!(first.contains("featurized 8 clips, reused 0"), "{first}");
    let second = ok(&["featurize", "--corpus", s(dir.path())]);
    assert!(second.contains("featurized 0 clips, reused 8"), "{second}");
}

fn train_log_modes(model_dir: &Path) -> Vec<(usize, String, String)> {
    let mut rdr = csv::Reader::from_path(model_dir.join(TRAIN_LOG_FILE)).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[1].to_string(), r[3].to_string())
        })
        .collect()
}

#[test]
fn ten_epochs_have_exactly_one_joint_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let model = dir.path().join("model");
    tiny_corpus(&corpus);
    ok(&["train", "--corpus", s(&corpus), "--out", s(&model), "--set", "epochs=10"]);
    let log = train_log_modes(&model);
    assert_eq!(log.len(), 10);
    let joint: Vec<usize> = log.iter().filter(|r| r.1 == "joint").map(|r| r.0).collect();
    assert_eq!(joint, vec![10]);
    for (epoch, _, loss_c) in &log {
        assert_eq!(loss_c.is_empty(), *epoch != 10);
    }

    let scores = dir.path().join("scores.csv");
    ok(&["score", "--model", s(&model), "--corpus", s(&corpus), "--out", s(&scores)]);
    let out = run(&[
        "score",
        "--model",
        s(&model),
        "--corpus",
        s(&corpus),
        "--out",
        s(&scores),
        "--machine-type",
        "fan",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let report = dir.path().join("report");
    ok(&["eval", "--scores", s(&scores), "--out", s(&report)]);
    for file in ["report.csv", "histogram.csv", "r_sweep.csv", "roc_synth.csv", "roc_synth.svg", "hist_synth.svg"] {
        assert!(report.join(file).is_file(), "{file} missing");
    }
}

#[test]
fn zero_alpha_leaves_classifier_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let model_dir = dir.path().join("model");
    tiny_corpus(&corpus);
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&model_dir),
        "--set",
        "epochs=10",
        "--set",
        "alpha=0",
        "--seed",
        "3",
    ]);
    assert!(train_log_modes(&model_dir).iter().all(|r| r.1 == "recon-only"));
    let (trained, _, _) = load_model(&model_dir).unwrap();
    let fresh = Model::new(trained.config.clone(), 3).unwrap();
    let mut classifier = 0;
    for id in trained.store.ids() {
        let same = trained.store.value(id).data() == fresh.store.value(id).data();
        if trained.is_classifier_param(id) {
            classifier += 1;
            assert!(same, "{} changed", trained.store.name(id));
        } else if trained.store.name(id) == "head.w" {
            assert!(!same, "head.w did not train");
        }
    }
    assert_eq!(classifier, 4);
}
