use proptest::prelude::*;

use openset_core::calibration::{fit_temperature, mean_nll, MAX_TEMPERATURE, MIN_TEMPERATURE, TemperatureTarget, Temperatures};
use openset_core::density::{
    cholesky, fit_density_model, fit_gmm_em, tp_id_samples, ClassDensityModel, ClassMixture, CovarianceKind, DensityConfig,
    GaussianComponent, SymMatrix,
};
use openset_core::features::{build_feature_set, entropy, gmm_entropy, prune, FeatureConfig, FeatureExtractor};
use openset_core::fusion::{
    decide, train_mlp, tune_thresholds, Classifier, ClassScheme, Decision, FusionClassifier, FusionModel, RuleKind,
    TrainingConfig,
};
use openset_core::interchange::{read_model, write_model, BBox, ClassVocabulary, DetectionRecord, GroundTruthObject};
use openset_core::matching::{label_detections, Collapsed};
use openset_core::metrics::{average_precision, Interpolation, ScoredDetection};
use openset_core::synth::{generate_synthetic, BenchmarkPart, SynthConfig};

fn vocab() -> ClassVocabulary {
    ClassVocabulary::new(vec!["a".into(), "b".into()]).unwrap()
}

fn boxes(max: usize) -> impl Strategy<Value = Vec<(f64, f64, f64, f64)>> {
    prop::collection::vec((0.0f64..60.0, 0.0f64..60.0, 5.0f64..30.0, 5.0f64..30.0), 0..max)
}

fn bbox((x, y, w, h): (f64, f64, f64, f64)) -> BBox {
    BBox::new(x, y, x + w, y + h)
}

fn detection(b: (f64, f64, f64, f64), logits: Vec<f64>) -> DetectionRecord {
    DetectionRecord {
        image_id: "im".into(),
        bbox: bbox(b),
        class_logits: logits,
        embedding: vec![0.0],
        detector_score: None,
    }
}

fn gts(raw: &[(f64, f64, f64, f64)], names: &[&str]) -> Vec<GroundTruthObject> {
    raw.iter()
        .enumerate()
        .map(|(i, &b)| GroundTruthObject {
            image_id: "im".into(),
            bbox: bbox(b),
            class_name: names[i % names.len()].to_string(),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_is_one_to_one_and_partitions(d in boxes(8), g in boxes(6)) {
        let dets: Vec<DetectionRecord> = d.iter().map(|&b| detection(b, vec![1.0, 0.0])).collect();
        let gt = gts(&g, &["a", "b", "kite"]);
        let labeled = label_detections(&dets, &gt, &vocab(), 0.5).unwrap();
        let mut used = std::collections::HashSet::new();
        for l in &labeled {
            prop_assert!(l.consistent());
            if let Some(idx) = l.matched_gt {
                prop_assert!(used.insert(idx));
            }
            let c = l.label.collapsed();
            prop_assert_eq!([Collapsed::Id, Collapsed::Ood, Collapsed::Bg].iter().filter(|x| **x == c).count(), 1);
        }
    }

    #[test]
    fn labels_do_not_depend_on_detection_order(d in boxes(7), g in boxes(5), seed in any::<u64>()) {
        let dets: Vec<DetectionRecord> = d.iter().map(|&b| detection(b, vec![1.0, 0.0])).collect();
        let gt = gts(&g, &["a", "kite"]);
        let base = label_detections(&dets, &gt, &vocab(), 0.5).unwrap();
        let mut order: Vec<usize> = (0..dets.len()).collect();
        let mut s = seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let shuffled: Vec<DetectionRecord> = order.iter().map(|&i| dets[i].clone()).collect();
        let again = label_detections(&shuffled, &gt, &vocab(), 0.5).unwrap();
        // Only generic instances: skip when equal IoUs could make the optimum ambiguous.
        let ious: Vec<u64> = base.iter().filter_map(|l| l.iou).map(f64::to_bits).collect();
        let distinct: std::collections::HashSet<_> = ious.iter().collect();
        prop_assume!(distinct.len() == ious.len());
        for (k, &i) in order.iter().enumerate() {
            prop_assert_eq!(again[k].label, base[i].label);
        }
    }

    #[test]
    fn regularized_covariances_factorize(points in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 2..30), k in 1usize..4) {
        prop_assume!(points.len() >= k);
        let fit = fit_gmm_em(&points, k, &DensityConfig::default()).unwrap();
        for c in &fit.components {
            prop_assert!(cholesky(&c.covariance).is_some());
        }
        for w in fit.objective_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * w[0].abs());
        }
    }

    #[test]
    fn gmm_likelihood_ignores_component_order(shift in -2.0f64..2.0, w in 0.1f64..0.9, x in prop::collection::vec(-4.0f64..4.0, 2)) {
        let comp = |m: f64, weight: f64, v: f64| GaussianComponent {
            weight,
            mean: vec![m, -m],
            covariance: SymMatrix::from(vec![vec![v, 0.1], vec![0.1, v]]),
        };
        let mixture = |comps: Vec<GaussianComponent>, name: &str| ClassMixture {
            class_name: name.into(),
            prior: 0.5,
            sample_count: 10,
            components: comps,
        };
        let a = vec![comp(shift, w, 1.0), comp(-shift, 1.0 - w, 2.0)];
        let b = vec![a[1].clone(), a[0].clone()];
        let other = vec![comp(1.0, 1.0, 1.5)];
        let m1 = ClassDensityModel::from_parts(vec![mixture(a, "a"), mixture(other.clone(), "b")], 1e-6, CovarianceKind::Full).unwrap();
        let m2 = ClassDensityModel::from_parts(vec![mixture(b, "a"), mixture(other, "b")], 1e-6, CovarianceKind::Full).unwrap();
        let l1 = m1.gmm_log_likelihoods(&x).unwrap();
        let l2 = m2.gmm_log_likelihoods(&x).unwrap();
        for (p, q) in l1.iter().zip(&l2) {
            prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }

    #[test]
    fn entropies_are_bounded(logits in prop::collection::vec(-40.0f64..40.0, 1..10)) {
        let c = logits.len() as f64;
        for h in [entropy(&logits), gmm_entropy(&logits)] {
            prop_assert!((0.0..=c.ln() + 1e-12).contains(&h));
        }
    }

    #[test]
    fn escape_is_monotone_in_tau(post in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..40), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let norm: Vec<Vec<f64>> = post.iter().map(|&(x, y, z)| {
            let s = x + y + z + 1e-9;
            vec![x / s, y / s, z / s]
        }).collect();
        let escaped = |tau: f64| norm.iter().filter(|p| decide(RuleKind::ThreeClass, tau, p) != Decision::Ood).count();
        prop_assert!(escaped(lo) <= escaped(hi));
    }

    #[test]
    fn ap_invariant_under_monotone_rescaling(d in boxes(8), g in boxes(5), confs in prop::collection::vec(0.01f64..1.0, 8)) {
        let gt = gts(&g, &["a", "b"]);
        let dets: Vec<ScoredDetection> = d.iter().enumerate().map(|(i, &b)| ScoredDetection {
            image_id: "im".into(),
            bbox: bbox(b),
            class: i % 2,
            confidence: confs[i],
        }).collect();
        let rescaled: Vec<ScoredDetection> = dets.iter().map(|s| ScoredDetection {
            confidence: if s.class == 0 { (5.0 * s.confidence).exp() } else { s.confidence.powi(3) - 7.0 },
            ..s.clone()
        }).collect();
        for interp in [Interpolation::AllPoint, Interpolation::ElevenPoint] {
            let x = average_precision(&dets, &gt, &vocab(), 0.5, interp).unwrap();
            let y = average_precision(&rescaled, &gt, &vocab(), 0.5, interp).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}

#[test]
fn temperature_beats_every_grid_point() {
    let logits: Vec<Vec<f64>> = (0..400)
        .map(|i| {
            let t = i as f64 * 0.37;
            vec![t.sin() * 4.0, t.cos() * 3.0, (t * 1.3).sin() * 2.0]
        })
        .collect();
    let labels: Vec<usize> = (0..400).map(|i| (i * 7 / 3) % 3).collect();
    let fit = fit_temperature(&logits, &labels, TemperatureTarget::DetectorLogits).unwrap();
    let again = fit_temperature(&logits, &labels, TemperatureTarget::DetectorLogits).unwrap();
    assert_eq!(fit, again);
    let best = mean_nll(&logits, &labels, fit.value);
    let (lo, hi) = (MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
    for i in 0..1000 {
        let t = (lo + (hi - lo) * i as f64 / 999.0).exp();
        assert!(best <= mean_nll(&logits, &labels, t) + 1e-6, "T = {t}");
    }
}

#[test]
fn prune_is_idempotent_and_shrinks() {
    let out = generate_synthetic(&SynthConfig::benchmark(BenchmarkPart::Calibration, 1)).unwrap();
    let b = &out.bundle;
    let labeled = label_detections(&b.detections, &b.ground_truth, &b.vocabulary, 0.5).unwrap();
    let once = prune(labeled.clone(), 0.2);
    assert!(once.len() <= labeled.len());
    assert_eq!(prune(once.clone(), 0.2), once);
}

#[test]
fn training_loss_trends_down_on_separable_data() {
    let x: Vec<Vec<f64>> = (0..1500)
        .map(|i| {
            let c = (i % 3) as f64;
            let j = i as f64 * 0.618;
            vec![4.0 * c + j.sin(), -3.0 * c + j.cos(), (j * 2.0).sin()]
        })
        .collect();
    let y: Vec<usize> = (0..1500).map(|i| i % 3).collect();
    let t = train_mlp(&x, &y, 3, &TrainingConfig { patience: 1000, max_epochs: 60, ..TrainingConfig::default() }).unwrap();
    let windows: Vec<f64> = t
        .report
        .train_loss
        .chunks(10)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    for w in windows.windows(2) {
        assert!(w[1] <= w[0], "{windows:?}");
    }
}

/// Model trained briefly on the synthetic benchmark, with its density model.
fn small_model() -> (FusionModel, ClassDensityModel, Vec<DetectionRecord>) {
    let out = generate_synthetic(&SynthConfig::benchmark(BenchmarkPart::Test, 4)).unwrap();
    let b = out.bundle;
    let labeled = label_detections(&b.detections, &b.ground_truth, &b.vocabulary, 0.5).unwrap();
    let density = fit_density_model(&b.vocabulary, &tp_id_samples(&labeled, &b.vocabulary), &DensityConfig::default()).unwrap();
    let config = FeatureConfig::all();
    let temps = Temperatures::default();
    let extractor = FeatureExtractor::new(config, temps, Some(&density)).unwrap();
    let set = build_feature_set(&labeled, &extractor, 0.2).unwrap();
    let scheme = ClassScheme::ThreeClass;
    let (x, y): (Vec<_>, Vec<_>) = set
        .rows
        .iter()
        .filter_map(|r| scheme.encode(r.label).map(|c| (r.features.clone(), c)))
        .unzip();
    let trained = train_mlp(&x, &y, 3, &TrainingConfig { max_epochs: 15, ..TrainingConfig::default() }).unwrap();
    let clf = FusionClassifier {
        scheme,
        parameters: trained.parameters,
        training: trained.report,
    };
    let post: Vec<Vec<f64>> = set.rows.iter().map(|r| clf.parameters.posterior(&r.features).unwrap()).collect();
    let labels: Vec<Collapsed> = set.rows.iter().map(|r| r.label).collect();
    let thresholds = tune_thresholds(&post, &labels, RuleKind::ThreeClass, 0.2).unwrap();
    let mut model = FusionModel::new(b.vocabulary.len(), temps);
    model.feature_config = Some(config);
    model.classifier = Some(clf);
    model.thresholds = Some(thresholds);
    let records = b.detections.into_iter().take(1000).collect();
    (model, density, records)
}

#[test]
fn model_round_trip_preserves_decisions() {
    let (model, density, records) = small_model();
    assert_eq!(records.len(), 1000);
    let mut model_bytes = Vec::new();
    write_model(&model, &mut model_bytes).unwrap();
    let mut density_bytes = Vec::new();
    write_model(&density, &mut density_bytes).unwrap();
    let model2: FusionModel = read_model(model_bytes.as_slice()).unwrap();
    let density2: ClassDensityModel = read_model(density_bytes.as_slice()).unwrap();
    assert_eq!(model2, model);
    assert_eq!(density2, density);
    let a = Classifier::new(&model, Some(&density)).unwrap();
    let b = Classifier::new(&model2, Some(&density2)).unwrap();
    let mut kinds = std::collections::BTreeSet::new();
    for r in &records {
        let d = a.classify(r).unwrap();
        assert_eq!(d, a.classify(r).unwrap());
        assert_eq!(d, b.classify(r).unwrap());
        assert_eq!(a.posterior(r).unwrap(), b.posterior(r).unwrap());
        kinds.insert(d.as_str());
    }
    assert!(kinds.len() >= 3, "{kinds:?}");
}
