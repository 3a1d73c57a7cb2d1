use openset_core::interchange::{DatasetBundle, DETECTIONS_FILE, GROUND_TRUTH_FILE, IMAGES_FILE, SPLIT_FILE, VOCABULARY_FILE};
use openset_core::matching::label_detections;
use openset_core::synth::{generate_synthetic, BenchmarkPart, SynthConfig};

#[test]
fn same_seed_writes_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let config = SynthConfig::benchmark(BenchmarkPart::Calibration, 12);
    for run in ["a", "b"] {
        generate_synthetic(&config).unwrap().bundle.write_dir(&tmp.path().join(run)).unwrap();
    }
    for file in [DETECTIONS_FILE, GROUND_TRUTH_FILE, VOCABULARY_FILE, IMAGES_FILE, SPLIT_FILE] {
        let a = std::fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn bundle_round_trips_and_keeps_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let out = generate_synthetic(&SynthConfig::benchmark(BenchmarkPart::Test, 2)).unwrap();
    out.bundle.write_dir(tmp.path()).unwrap();
    let back = DatasetBundle::read_dir(tmp.path()).unwrap();
    assert_eq!(back, out.bundle);
    let labeled = label_detections(&back.detections, &back.ground_truth, &back.vocabulary, 0.5).unwrap();
    let labels: Vec<_> = labeled.iter().map(|d| d.label).collect();
    assert_eq!(labels, out.intended);
}

#[test]
fn undeclared_image_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = generate_synthetic(&SynthConfig::benchmark(BenchmarkPart::Calibration, 3)).unwrap();
    out.bundle.write_dir(tmp.path()).unwrap();
    let images = std::fs::read_to_string(tmp.path().join(IMAGES_FILE)).unwrap();
    let trimmed: Vec<&str> = images.lines().skip(1).collect();
    std::fs::write(tmp.path().join(IMAGES_FILE), trimmed.join("\n")).unwrap();
    assert!(DatasetBundle::read_dir(tmp.path()).is_err());
}
