use std::path::Path;
use std::process::{Command, Output};

fn openset(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_openset"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let o = openset(args, cwd);
    assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    o
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&openset(&[], tmp.path())), 1);
    assert_eq!(code(&openset(&["frobnicate"], tmp.path())), 1);
    assert_eq!(code(&openset(&["match", "--out", "x.jsonl"], tmp.path())), 1);
    assert_eq!(code(&openset(&["run", "--config", "c", "--from", "nowhere"], tmp.path())), 1);
    assert_eq!(code(&openset(&["--help"], tmp.path())), 0);
}

#[test]
fn data_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = openset(&["run", "--config", "missing.conf"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.conf"));
    std::fs::write(tmp.path().join("bad.conf"), "seed = 1\nflavour = mint\n").unwrap();
    let o = openset(&["run", "--config", "bad.conf"], tmp.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("flavour"), "{}", stderr(&o));
}

#[test]
fn stepwise_pipeline_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["synth", "--out-dir", "data", "--seed", "5"], dir);
    for part in ["train", "calibration", "test"] {
        ok(&["match", "--bundle", &format!("data/{part}"), "--out", &format!("w/{part}_labeled.jsonl")], dir);
    }
    ok(
        &[
            "match",
            "--detections",
            "data/test/detections.jsonl",
            "--ground-truth",
            "data/test/ground_truth.jsonl",
            "--vocabulary",
            "data/test/vocabulary.txt",
            "--out",
            "w/test_labeled_files.jsonl",
        ],
        dir,
    );
    assert_eq!(
        std::fs::read(dir.join("w/test_labeled.jsonl")).unwrap(),
        std::fs::read(dir.join("w/test_labeled_files.jsonl")).unwrap()
    );
    let vocab = "data/train/vocabulary.txt";
    ok(&["fit-gmm", "--labeled", "w/train_labeled.jsonl", "--vocabulary", vocab, "--seed", "1", "--out", "w/density.json"], dir);
    ok(
        &[
            "calibrate",
            "--labeled",
            "w/calibration_labeled.jsonl",
            "--vocabulary",
            vocab,
            "--density",
            "w/density.json",
            "--out",
            "w/fusion.json",
        ],
        dir,
    );

    let o = openset(
        &["build-features", "--labeled", "w/train_labeled.jsonl", "--model", "w/fusion.json", "--out", "w/f.jsonl"],
        dir,
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("density"), "{}", stderr(&o));

    for (part, extra) in [("train", false), ("test", true)] {
        let labeled = format!("w/{part}_labeled.jsonl");
        let out = format!("w/{part}_features.jsonl");
        let mut args = vec![
            "build-features",
            "--labeled",
            &labeled,
            "--model",
            "w/fusion.json",
            "--density",
            "w/density.json",
            "--features",
            "Score,Entropy,Density,GMM Entr.,GMM Dens.,logits,gmm_logits",
            "--out",
            &out,
        ];
        if extra {
            args.push("--update-model");
        }
        ok(&args, dir);
    }
    ok(
        &[
            "split",
            "--train-features",
            "w/train_features.jsonl",
            "--test-features",
            "w/test_features.jsonl",
            "--test-images",
            "data/test/images.txt",
            "--ratio",
            "3:1",
            "--seed",
            "2",
            "--out-dir",
            "w/split",
        ],
        dir,
    );
    ok(
        &[
            "train-mlp",
            "--features",
            "w/split/train_features.jsonl",
            "--model",
            "w/fusion.json",
            "--classes",
            "3",
            "--seed",
            "3",
            "--out",
            "w/trained.json",
        ],
        dir,
    );
    let val = "w/split/validation_features.jsonl";
    let o = openset(
        &["tune-thresholds", "--model", "w/trained.json", "--features", val, "--escape-bound", "-0.5", "--out", "w/t.json"],
        dir,
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    ok(&["tune-thresholds", "--model", "w/trained.json", "--features", val, "--out", "w/tuned.json"], dir);
    let o = ok(
        &[
            "evaluate",
            "--model",
            "w/tuned.json",
            "--density",
            "w/density.json",
            "--features",
            val,
            "--labeled",
            "w/test_labeled.jsonl",
            "--bundle",
            "data/test",
            "--split",
            "w/split/split.json",
            "--fps-runs",
            "1",
            "--out-dir",
            "w/eval",
        ],
        dir,
    );
    assert!(String::from_utf8_lossy(&o.stdout).contains("Three-class separation"));
    for f in ["report.json", "report.txt", "roc_fusion.csv", "roc_fusion-bd.csv"] {
        assert!(dir.join("w/eval").join(f).exists(), "{f}");
    }
    let roc = std::fs::read_to_string(dir.join("w/eval/roc_fusion.csv")).unwrap();
    assert!(roc.starts_with("fpr,tpr\n"));

    ok(&["report", "--report", "w/eval/report.json", "--out-dir", "w/rendered"], dir);
    assert_eq!(
        std::fs::read_to_string(dir.join("w/eval/report.txt")).unwrap(),
        std::fs::read_to_string(dir.join("w/rendered/report.txt")).unwrap()
    );

    let o = ok(
        &[
            "classify",
            "--model",
            "w/tuned.json",
            "--density",
            "w/density.json",
            "--input",
            "data/test/detections.jsonl",
            "--measure-fps",
            "--fps-runs",
            "1",
        ],
        dir,
    );
    let out = String::from_utf8(o.stdout.clone()).unwrap();
    let n_in = std::fs::read_to_string(dir.join("data/test/detections.jsonl")).unwrap().lines().count();
    assert_eq!(out.lines().count(), n_in);
    for line in out.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let d = v["decision"].as_str().unwrap();
        assert!(["ID", "OOD", "BG", "SUPPRESSED"].contains(&d), "{d}");
        assert_eq!(d == "SUPPRESSED", v["posterior"].is_null());
    }
    assert!(stderr(&o).contains("detections/s"));
}

#[test]
fn run_is_reproducible_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["synth", "--out-dir", "data", "--seed", "8"], dir);
    let conf = dir.join("data/pipeline.conf");
    let text = std::fs::read_to_string(&conf).unwrap() + "fps_runs = 0\n";
    std::fs::write(&conf, text).unwrap();
    let first = ok(&["run", "--config", "data/pipeline.conf"], dir).stdout;
    let report = std::fs::read(dir.join("data/run/report.json")).unwrap();
    let resumed = ok(&["run", "--config", "data/pipeline.conf", "--from", "split"], dir).stdout;
    assert_eq!(first, resumed);
    assert_eq!(report, std::fs::read(dir.join("data/run/report.json")).unwrap());

    std::fs::write(dir.join("data/run/features_test.jsonl"), "tampered\n").unwrap();
    let o = openset(&["run", "--config", "data/pipeline.conf", "--from", "split"], dir);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("features_test.jsonl"), "{}", stderr(&o));
}
