use std::path::Path;

use openset_core::pipeline::{artifacts, run_pipeline, Manifest, PipelineConfig, PipelineError, Stage};
use openset_core::synth::{generate_synthetic, BenchmarkPart, SynthConfig};
use openset_core::Error;

fn write_benchmark(dir: &Path, seed: u64) {
    for part in BenchmarkPart::ALL {
        let out = generate_synthetic(&SynthConfig::benchmark(part, seed)).unwrap();
        out.bundle.write_dir(&dir.join(part.name())).unwrap();
    }
}

fn config(dir: &Path, out: &str) -> PipelineConfig {
    let mut c = PipelineConfig::new(dir.join("train"), dir.join("test"), dir.join(out), 7);
    c.calibration_bundle = Some(dir.join("calibration"));
    c.fps_runs = 0;
    c
}

#[test]
fn full_run_resume_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    write_benchmark(tmp.path(), 3);
    let c = config(tmp.path(), "run");
    let report = run_pipeline(&c, None).unwrap();
    let text = std::fs::read_to_string(c.output_dir.join(artifacts::REPORT_TEXT)).unwrap();
    println!("{text}");
    let best = report
        .baselines
        .iter()
        .filter_map(|b| b.pairwise.map(|p| p.macro_auroc))
        .fold(f64::MIN, f64::max);
    assert!(report.pairwise.unwrap().macro_auroc > best);

    let manifest = Manifest::read(&c.output_dir.join(artifacts::MANIFEST)).unwrap();
    assert_eq!(manifest.stages.len(), Stage::ALL.len());
    let split = manifest.stages.iter().find(|s| s.stage == Stage::Split).unwrap();
    let features = manifest.stages.iter().find(|s| s.stage == Stage::BuildFeatures).unwrap();
    let total: usize = split.counts.values().sum();
    let rows = features.counts["features_train.jsonl/rows"] + features.counts["features_test.jsonl/rows"];
    assert_eq!(total, rows);

    let resumed = run_pipeline(&c, Some(Stage::TrainMlp)).unwrap();
    assert_eq!(resumed, report);

    let again = run_pipeline(&config(tmp.path(), "rerun"), None).unwrap();
    assert_eq!(again, report);

    std::fs::write(c.output_dir.join(artifacts::SPLIT), "{}").unwrap();
    let err = run_pipeline(&c, Some(Stage::TrainMlp)).unwrap_err();
    assert!(matches!(err, Error::Pipeline(PipelineError::HashMismatch { .. })), "{err}");
}

#[test]
fn missing_density_named_at_build_features() {
    let tmp = tempfile::tempdir().unwrap();
    write_benchmark(tmp.path(), 4);
    let mut c = config(tmp.path(), "run");
    c.fit_gmm = false;
    let err = run_pipeline(&c, None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.starts_with("build-features"), "{msg}");
    assert!(msg.contains(artifacts::DENSITY), "{msg}");
}
