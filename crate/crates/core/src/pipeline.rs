//! End-to-end orchestration: configuration, the fusion train/validation
//! split, stage functions and the resumable run with its hash manifest.
//!
//! Stages run in the order of [`Stage::ALL`]. Each stage reads its inputs
//! from the output directory and writes its own artifacts, so a run can
//! resume at any stage once the manifest confirms the earlier artifacts are
//! unchanged.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calibration::{fit_temperature, TemperatureTarget, Temperatures};
use crate::density::{fit_density_model, tp_id_samples, ClassDensityModel, CovarianceKind, DensityConfig};
use crate::error::{Error, Result};
use crate::features::{build_feature_set, score, FeatureConfig, FeatureExtractor, FeatureKind, FeatureSet, GmmDensityMode};
use crate::fusion::{
    train_mlp, tune_thresholds, Classifier, ClassScheme, DecisionThresholds, FusionClassifier, FusionError, FusionModel,
    RuleKind, TrainingConfig, DEFAULT_ESCAPE_BOUND,
};
use crate::interchange::{
    create_file, open_file, read_jsonl, read_model_file, write_jsonl_file, write_model_file, ClassVocabulary,
    DatasetBundle, InterchangeError,
};
use crate::matching::{label_detections, Collapsed, LabeledDetection, MatchLabel, DEFAULT_IOU_THRESHOLD};
use crate::metrics::{
    auroc, auroc_bd, average_precision, baseline_row, macro_pairwise_auroc, measure_throughput, roc_curve, tpr_at_osr,
    EvalReport, Interpolation, ScoredDetection, DEFAULT_OSR_LEVELS,
};
use crate::numeric::argmax;
use crate::rng::{substream, substream_seed};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config key `{key}`: invalid value `{value}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("config is missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("{0} source has no usable samples")]
    EmptySource(String),
    #[error("stage {stage} needs `{path}`, which does not exist")]
    MissingArtifact { stage: &'static str, path: String },
    #[error("artifact `{path}` does not match the hash recorded in the manifest")]
    HashMismatch { path: String },
    #[error("configuration changed since the manifest was written; rerun from the first stage")]
    ConfigChanged,
    #[error("cannot resume: no manifest in {0}")]
    NoManifest(String),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("split: {0}")]
    Split(String),
}

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> PipelineError {
    PipelineError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Match,
    FitGmm,
    Calibrate,
    BuildFeatures,
    Split,
    TrainMlp,
    TuneThresholds,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Match,
        Stage::FitGmm,
        Stage::Calibrate,
        Stage::BuildFeatures,
        Stage::Split,
        Stage::TrainMlp,
        Stage::TuneThresholds,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Match => "match",
            Stage::FitGmm => "fit-gmm",
            Stage::Calibrate => "calibrate",
            Stage::BuildFeatures => "build-features",
            Stage::Split => "split",
            Stage::TrainMlp => "train-mlp",
            Stage::TuneThresholds => "tune-thresholds",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = PipelineError;
    fn from_str(s: &str) -> std::result::Result<Self, PipelineError> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::UnknownStage(s.to_string()))
    }
}

/// `train:test` proportion of ID (and BG) training samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub train: u32,
    pub test: u32,
}

impl std::str::FromStr for Ratio {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s.split_once(':').ok_or("expected `a:b`")?;
        let train: u32 = a.trim().parse().map_err(|_| "ratio parts must be integers")?;
        let test: u32 = b.trim().parse().map_err(|_| "ratio parts must be integers")?;
        if train == 0 && test == 0 {
            return Err("at least one ratio part must be positive".into());
        }
        Ok(Ratio { train, test })
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.train, self.test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub id_ratio: Ratio,
    /// Fraction of ood-test images reserved for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl SplitPlan {
    fn validate(&self) -> std::result::Result<(), PipelineError> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(invalid(
                "validation_fraction",
                &self.validation_fraction.to_string(),
                "must be in (0, 1)",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    DetectorTrain,
    OodTest,
    Proxy,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::DetectorTrain => "detector-train",
            Source::OodTest => "ood-test",
            Source::Proxy => "proxy",
        }
    }
}

/// Training/validation composition; rows refer to positions in each
/// source's feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSplit {
    pub plan: SplitPlan,
    pub validation_images: Vec<String>,
    pub train: Vec<(Source, usize)>,
    pub validation: Vec<usize>,
    /// `role/source/label` -> count; role is train, validation or unused.
    pub counts: BTreeMap<String, usize>,
}

fn take_ratio(a: usize, b: usize, ratio: Ratio) -> (usize, usize) {
    let (ra, rb) = (ratio.train as usize, ratio.test as usize);
    if ra == 0 {
        return (0, b);
    }
    if rb == 0 {
        return (a, 0);
    }
    if a * rb >= b * ra {
        (b * ra / rb, b)
    } else {
        (a, a * rb / ra)
    }
}

/// Deterministic subset of `k` of `idx`, kept in original order.
fn subsample(idx: &[usize], k: usize, rng: &mut crate::rng::StageRng) -> Vec<usize> {
    if k >= idx.len() {
        return idx.to_vec();
    }
    let mut v = idx.to_vec();
    v.shuffle(rng);
    v.truncate(k);
    v.sort_unstable();
    v
}

/// Builds the fusion training set from both sources and the validation set
/// from held-out ood-test images only.
pub fn build_fusion_dataset(
    train_source: &FeatureSet,
    test_source: &FeatureSet,
    test_images: &[String],
    proxy_ood: Option<&FeatureSet>,
    plan: &SplitPlan,
) -> std::result::Result<FusionSplit, PipelineError> {
    plan.validate()?;
    let mut rng = substream(plan.seed, "split");
    let unique: BTreeSet<&String> = test_images.iter().collect();
    let mut images: Vec<&String> = unique.into_iter().collect();
    images.shuffle(&mut rng);
    let n_val = ((images.len() as f64) * plan.validation_fraction).ceil() as usize;
    if n_val == 0 || n_val >= images.len() {
        return Err(PipelineError::Split(format!(
            "cannot carve a validation split from {} ood-test images at fraction {}",
            images.len(),
            plan.validation_fraction
        )));
    }
    let mut validation_images: Vec<String> = images[..n_val].iter().map(|s| s.to_string()).collect();
    validation_images.sort();
    let val_set: HashSet<&str> = validation_images.iter().map(String::as_str).collect();

    let by_label = |set: &FeatureSet, label: Collapsed, in_val: Option<bool>| -> Vec<usize> {
        set.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label)
            .filter(|(_, r)| in_val.is_none_or(|v| val_set.contains(r.image_id.as_str()) == v))
            .map(|(i, _)| i)
            .collect()
    };

    let mut counts = BTreeMap::new();
    let mut bump = |role: &str, source: Source, label: Collapsed, n: usize| {
        *counts.entry(format!("{role}/{}/{}", source.name(), label.as_str())).or_insert(0) += n;
    };
    let mut train = Vec::new();
    for label in [Collapsed::Id, Collapsed::Bg] {
        let a = by_label(train_source, label, None);
        let b = by_label(test_source, label, Some(false));
        if label == Collapsed::Id {
            if plan.id_ratio.train > 0 && a.is_empty() {
                return Err(PipelineError::EmptySource("detector-train ID".into()));
            }
            if plan.id_ratio.test > 0 && b.is_empty() {
                return Err(PipelineError::EmptySource("ood-test ID".into()));
            }
        }
        let (ka, kb) = if a.is_empty() || b.is_empty() {
            (a.len(), b.len())
        } else {
            take_ratio(a.len(), b.len(), plan.id_ratio)
        };
        if ka < a.len() || kb < b.len() {
            warn!(
                "{} ratio {}: using {ka} of {} detector-train and {kb} of {} ood-test samples",
                label.as_str(),
                plan.id_ratio,
                a.len(),
                b.len()
            );
        }
        let sa = subsample(&a, ka, &mut rng);
        let sb = subsample(&b, kb, &mut rng);
        bump("train", Source::DetectorTrain, label, sa.len());
        bump("train", Source::OodTest, label, sb.len());
        bump("unused", Source::DetectorTrain, label, a.len() - sa.len());
        bump("unused", Source::OodTest, label, b.len() - sb.len());
        train.extend(sa.into_iter().map(|i| (Source::DetectorTrain, i)));
        train.extend(sb.into_iter().map(|i| (Source::OodTest, i)));
    }
    let leftover_train_ood = by_label(train_source, Collapsed::Ood, None).len();
    bump("unused", Source::DetectorTrain, Collapsed::Ood, leftover_train_ood);
    let test_ood = by_label(test_source, Collapsed::Ood, Some(false));
    match proxy_ood {
        Some(proxy) => {
            let p = by_label(proxy, Collapsed::Ood, None);
            if p.is_empty() {
                return Err(PipelineError::EmptySource("proxy OOD".into()));
            }
            bump("train", Source::Proxy, Collapsed::Ood, p.len());
            bump("unused", Source::OodTest, Collapsed::Ood, test_ood.len());
            train.extend(p.into_iter().map(|i| (Source::Proxy, i)));
        }
        None => {
            if test_ood.is_empty() {
                return Err(PipelineError::EmptySource("ood-test OOD".into()));
            }
            bump("train", Source::OodTest, Collapsed::Ood, test_ood.len());
            train.extend(test_ood.into_iter().map(|i| (Source::OodTest, i)));
        }
    }

    let validation: Vec<usize> = test_source
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| val_set.contains(r.image_id.as_str()))
        .map(|(i, _)| i)
        .collect();
    for &i in &validation {
        bump("validation", Source::OodTest, test_source.rows[i].label, 1);
    }
    if !validation.iter().any(|&i| test_source.rows[i].label == Collapsed::Ood) {
        return Err(PipelineError::EmptySource("validation OOD".into()));
    }
    Ok(FusionSplit {
        plan: *plan,
        validation_images,
        train,
        validation,
        counts,
    })
}

impl FusionSplit {
    /// Materializes the training rows.
    pub fn train_set(&self, train_source: &FeatureSet, test_source: &FeatureSet, proxy: Option<&FeatureSet>) -> FeatureSet {
        let rows = self
            .train
            .iter()
            .map(|&(src, i)| match src {
                Source::DetectorTrain => train_source.rows[i].clone(),
                Source::OodTest => test_source.rows[i].clone(),
                Source::Proxy => proxy.expect("proxy rows referenced").rows[i].clone(),
            })
            .collect();
        FeatureSet {
            header: test_source.header.clone(),
            rows,
        }
    }

    pub fn validation_set(&self, test_source: &FeatureSet) -> FeatureSet {
        FeatureSet {
            header: test_source.header.clone(),
            rows: self.validation.iter().map(|&i| test_source.rows[i].clone()).collect(),
        }
    }
}

/// Where OOD training samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OodSource {
    TestSet,
    /// OOD-labeled detections of another bundle.
    Bundle(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train_bundle: PathBuf,
    pub test_bundle: PathBuf,
    pub calibration_bundle: Option<PathBuf>,
    pub ood_source: OodSource,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub iou_threshold: f64,
    pub fit_gmm: bool,
    pub components: usize,
    pub epsilon: f64,
    pub covariance: CovarianceKind,
    pub calibrate_gmm: bool,
    pub features: FeatureConfig,
    pub prune_threshold: f64,
    pub id_ratio: Ratio,
    pub validation_fraction: f64,
    pub scheme: ClassScheme,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
    pub escape_bound: f64,
    pub ap_iou_threshold: f64,
    pub ap_interpolation: Interpolation,
    /// Timing runs for throughput; 0 skips the measurement.
    pub fps_runs: usize,
}

/// Keys accepted in the configuration file.
pub const CONFIG_KEYS: &[&str] = &[
    "train_bundle",
    "test_bundle",
    "calibration_bundle",
    "ood_source",
    "output_dir",
    "seed",
    "iou_threshold",
    "fit_gmm",
    "components",
    "epsilon",
    "covariance",
    "calibrate_gmm",
    "features",
    "gmm_density",
    "prune_threshold",
    "id_ratio",
    "validation_fraction",
    "classes",
    "bg_as_ood",
    "hidden",
    "learning_rate",
    "momentum",
    "batch_size",
    "epochs",
    "patience",
    "holdout_fraction",
    "escape_bound",
    "ap_iou_threshold",
    "ap_interpolation",
    "fps_runs",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, PipelineError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| invalid(key, value, e.to_string()))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, PipelineError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(invalid(key, value, "expected true or false")),
    }
}

impl PipelineConfig {
    /// Configuration with the given paths and seed and documented defaults.
    pub fn new(train_bundle: PathBuf, test_bundle: PathBuf, output_dir: PathBuf, seed: u64) -> Self {
        let t = TrainingConfig::default();
        PipelineConfig {
            train_bundle,
            test_bundle,
            calibration_bundle: None,
            ood_source: OodSource::TestSet,
            output_dir,
            seed,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            fit_gmm: true,
            components: 1,
            epsilon: crate::density::DEFAULT_EPSILON,
            covariance: CovarianceKind::Full,
            calibrate_gmm: true,
            features: FeatureConfig::all(),
            prune_threshold: crate::features::DEFAULT_PRUNE_THRESHOLD,
            id_ratio: Ratio { train: 1, test: 1 },
            validation_fraction: 0.5,
            scheme: ClassScheme::ThreeClass,
            hidden: t.hidden,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            epochs: t.max_epochs,
            patience: t.patience,
            holdout_fraction: t.holdout_fraction,
            escape_bound: DEFAULT_ESCAPE_BOUND,
            ap_iou_threshold: DEFAULT_IOU_THRESHOLD,
            ap_interpolation: Interpolation::AllPoint,
            fps_runs: 3,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Relative paths are
    /// resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> std::result::Result<Self, PipelineError> {
        let mut map: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| PipelineError::Syntax {
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            let k = k.trim().to_string();
            if !CONFIG_KEYS.contains(&k.as_str()) {
                return Err(PipelineError::UnknownKey { line: i + 1, key: k });
            }
            if map.insert(k.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(PipelineError::Syntax {
                    line: i + 1,
                    message: format!("duplicate key `{k}`"),
                });
            }
        }
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let required = |k: &'static str| map.get(k).map(|(_, v)| v.clone()).ok_or(PipelineError::MissingKey(k));
        let mut c = PipelineConfig::new(
            path(&required("train_bundle")?),
            path(&required("test_bundle")?),
            path(&required("output_dir")?),
            parse_value("seed", &required("seed")?)?,
        );
        let mut gmm_mode = GmmDensityMode::LogSumExp;
        let mut classes = 3usize;
        let mut bg_as_ood = false;
        for (k, (_, v)) in &map {
            let v = v.as_str();
            match k.as_str() {
                "train_bundle" | "test_bundle" | "output_dir" | "seed" => {}
                "calibration_bundle" => c.calibration_bundle = Some(path(v)),
                "ood_source" => {
                    c.ood_source = if v == "test" {
                        OodSource::TestSet
                    } else {
                        OodSource::Bundle(path(v))
                    }
                }
                "iou_threshold" => c.iou_threshold = parse_value(k, v)?,
                "fit_gmm" => c.fit_gmm = parse_bool(k, v)?,
                "components" => c.components = parse_value(k, v)?,
                "epsilon" => c.epsilon = parse_value(k, v)?,
                "covariance" => {
                    c.covariance = match v {
                        "full" => CovarianceKind::Full,
                        "diagonal" => CovarianceKind::Diagonal,
                        _ => return Err(invalid(k, v, "expected full or diagonal")),
                    }
                }
                "calibrate_gmm" => c.calibrate_gmm = parse_bool(k, v)?,
                "features" => c.features = FeatureConfig::parse_list(v).map_err(|e| invalid(k, v, e.to_string()))?,
                "gmm_density" => {
                    gmm_mode = match v {
                        "log-sum-exp" => GmmDensityMode::LogSumExp,
                        "max" => GmmDensityMode::Max,
                        _ => return Err(invalid(k, v, "expected log-sum-exp or max")),
                    }
                }
                "prune_threshold" => c.prune_threshold = parse_value(k, v)?,
                "id_ratio" => c.id_ratio = parse_value(k, v)?,
                "validation_fraction" => c.validation_fraction = parse_value(k, v)?,
                "classes" => classes = parse_value(k, v)?,
                "bg_as_ood" => bg_as_ood = parse_bool(k, v)?,
                "hidden" => {
                    c.hidden = v
                        .split(',')
                        .map(|s| parse_value::<usize>(k, s.trim()))
                        .collect::<std::result::Result<_, _>>()?
                }
                "learning_rate" => c.learning_rate = parse_value(k, v)?,
                "momentum" => c.momentum = parse_value(k, v)?,
                "batch_size" => c.batch_size = parse_value(k, v)?,
                "epochs" => c.epochs = parse_value(k, v)?,
                "patience" => c.patience = parse_value(k, v)?,
                "holdout_fraction" => c.holdout_fraction = parse_value(k, v)?,
                "escape_bound" => c.escape_bound = parse_value(k, v)?,
                "ap_iou_threshold" => c.ap_iou_threshold = parse_value(k, v)?,
                "ap_interpolation" => {
                    c.ap_interpolation = match v {
                        "all-point" => Interpolation::AllPoint,
                        "11-point" => Interpolation::ElevenPoint,
                        _ => return Err(invalid(k, v, "expected all-point or 11-point")),
                    }
                }
                "fps_runs" => c.fps_runs = parse_value(k, v)?,
                _ => unreachable!("key list checked above"),
            }
        }
        c.features.gmm_density_mode = gmm_mode;
        c.scheme = ClassScheme::from_classes(classes, bg_as_ood)
            .map_err(|e| invalid("classes", &classes.to_string(), e.to_string()))?;
        if !(c.iou_threshold > 0.0 && c.iou_threshold < 1.0) {
            return Err(invalid("iou_threshold", &c.iou_threshold.to_string(), "must be in (0, 1)"));
        }
        if c.components == 0 {
            return Err(invalid("components", "0", "must be positive"));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        open_file(path)?.read_to_string(&mut text).map_err(InterchangeError::from)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(PipelineConfig::parse(&text, base)?)
    }

    pub fn density_config(&self) -> DensityConfig {
        DensityConfig {
            components: self.components,
            epsilon: self.epsilon,
            covariance: self.covariance,
            seed: substream_seed(self.seed, Stage::FitGmm.name()),
            ..DensityConfig::default()
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            hidden: self.hidden.clone(),
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            holdout_fraction: self.holdout_fraction,
            seed: substream_seed(self.seed, Stage::TrainMlp.name()),
        }
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            id_ratio: self.id_ratio,
            validation_fraction: self.validation_fraction,
            seed: substream_seed(self.seed, Stage::Split.name()),
        }
    }

    /// Hash of the parsed configuration; independent of comments and key order.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Artifact file names inside the output directory.
pub mod artifacts {
    pub const LABELED_TRAIN: &str = "labeled_train.jsonl";
    pub const LABELED_TEST: &str = "labeled_test.jsonl";
    pub const LABELED_CALIBRATION: &str = "labeled_calibration.jsonl";
    pub const LABELED_PROXY: &str = "labeled_proxy.jsonl";
    pub const DENSITY: &str = "density.json";
    pub const FUSION_CALIBRATED: &str = "fusion_calibrated.json";
    pub const FEATURES_TRAIN: &str = "features_train.jsonl";
    pub const FEATURES_TEST: &str = "features_test.jsonl";
    pub const FEATURES_PROXY: &str = "features_proxy.jsonl";
    pub const SPLIT: &str = "split.json";
    pub const TRAIN_FEATURES: &str = "train_features.jsonl";
    pub const VALIDATION_FEATURES: &str = "validation_features.jsonl";
    pub const FUSION_TRAINED: &str = "fusion_trained.json";
    pub const FUSION: &str = "fusion.json";
    pub const REPORT_JSON: &str = "report.json";
    pub const REPORT_TEXT: &str = "report.txt";
    pub const MANIFEST: &str = "manifest.json";
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = open_file(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(InterchangeError::from)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Artifact name -> sha256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_fingerprint: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::interchange::file_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| InterchangeError::ModelParse(e.to_string()).into())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = create_file(path)?;
        serde_json::to_writer_pretty(&mut f, self).map_err(std::io::Error::other).map_err(InterchangeError::from)?;
        std::io::Write::write_all(&mut f, b"\n").map_err(InterchangeError::from)?;
        Ok(())
    }
}

/// Samples for temperature fitting: every matched ID detection with the
/// index of its ground-truth class.
pub fn calibration_samples(labeled: &[LabeledDetection], vocabulary: &ClassVocabulary) -> Vec<(usize, usize)> {
    labeled
        .iter()
        .enumerate()
        .filter(|(_, d)| matches!(d.label, MatchLabel::TpId | MatchLabel::FpId))
        .filter_map(|(i, d)| d.true_class(vocabulary).map(|c| (i, c)))
        .collect()
}

/// Fits the detector temperature and, with a density model, the GMM temperature.
pub fn calibrate_temperatures(
    labeled: &[LabeledDetection],
    vocabulary: &ClassVocabulary,
    density: Option<&ClassDensityModel>,
) -> Result<Temperatures> {
    let samples = calibration_samples(labeled, vocabulary);
    let labels: Vec<usize> = samples.iter().map(|s| s.1).collect();
    let logits: Vec<Vec<f64>> = samples.iter().map(|&(i, _)| labeled[i].record.class_logits.clone()).collect();
    let detector = fit_temperature(&logits, &labels, TemperatureTarget::DetectorLogits)?;
    let gmm = match density {
        Some(model) => {
            let gl = samples
                .iter()
                .map(|&(i, _)| model.gmm_log_likelihoods(&labeled[i].record.embedding))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Some(fit_temperature(&gl, &labels, TemperatureTarget::GmmLogits)?)
        }
        None => None,
    };
    info!(
        "temperatures: detector {:.4}, gmm {}",
        detector.value,
        gmm.map_or("-".to_string(), |t| format!("{:.4}", t.value))
    );
    Ok(Temperatures { detector, gmm })
}

/// Trains the fusion MLP on a feature set under a label scheme.
pub fn train_fusion(train: &FeatureSet, scheme: ClassScheme, config: &TrainingConfig) -> Result<FusionClassifier> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for r in &train.rows {
        if let Some(c) = scheme.encode(r.label) {
            x.push(r.features.clone());
            y.push(c);
        }
    }
    let trained = train_mlp(&x, &y, scheme.num_classes(), config)?;
    Ok(FusionClassifier {
        scheme,
        parameters: trained.parameters,
        training: trained.report,
    })
}

pub fn posteriors(classifier: &FusionClassifier, set: &FeatureSet) -> Result<Vec<Vec<f64>>> {
    set.rows
        .iter()
        .map(|r| classifier.parameters.posterior(&r.features).map_err(Error::from))
        .collect()
}

/// Tunes `tau_ood` on the validation rows.
pub fn tune_on(classifier: &FusionClassifier, validation: &FeatureSet, bound: f64) -> Result<DecisionThresholds> {
    let post = posteriors(classifier, validation)?;
    let labels: Vec<Collapsed> = validation.rows.iter().map(|r| r.label).collect();
    let rule = RuleKind::for_classes(classifier.scheme.num_classes())?;
    Ok(tune_thresholds(&post, &labels, rule, bound)?)
}

/// Inputs to [`evaluate`].
pub struct EvalInputs<'a> {
    pub model: &'a FusionModel,
    pub density: Option<&'a ClassDensityModel>,
    pub validation: &'a FeatureSet,
    /// Labeled detections the validation rows index into.
    pub labeled: &'a [LabeledDetection],
    pub bundle: &'a DatasetBundle,
    pub validation_images: &'a [String],
    pub ap_iou_threshold: f64,
    pub interpolation: Interpolation,
    pub fps_runs: usize,
}

pub fn evaluate(inputs: &EvalInputs<'_>) -> Result<EvalReport> {
    let model = inputs.model;
    let classifier = model.classifier()?;
    let thresholds = model.decision_thresholds()?;
    let rows = &inputs.validation.rows;
    let labels: Vec<Collapsed> = rows.iter().map(|r| r.label).collect();
    let post = posteriors(classifier, inputs.validation)?;
    let id_score: Vec<f64> = post.iter().map(|p| p[0]).collect();
    let split = |scores: &[f64], l: Collapsed| -> Vec<f64> {
        scores.iter().zip(&labels).filter(|(_, x)| **x == l).map(|(s, _)| *s).collect()
    };
    let (id, ood, bg) = (split(&id_score, Collapsed::Id), split(&id_score, Collapsed::Ood), split(&id_score, Collapsed::Bg));
    let a = auroc(&id, &ood)?;
    let bd = auroc_bd(&id, &ood, &bg)?;
    let pairwise = if classifier.scheme == ClassScheme::ThreeClass {
        Some(macro_pairwise_auroc(&post, &labels)?)
    } else {
        None
    };
    let tpr = tpr_at_osr(&id, &ood, &DEFAULT_OSR_LEVELS)?;
    let mut roc_curves = BTreeMap::new();
    roc_curves.insert("fusion".to_string(), roc_curve(&id, &ood)?);
    let negatives: Vec<f64> = ood.iter().chain(&bg).copied().collect();
    roc_curves.insert("fusion-bd".to_string(), roc_curve(&id, &negatives)?);

    let mut counts = BTreeMap::new();
    for r in rows {
        let l = inputs.labeled[r.index].label;
        *counts.entry(l.as_str().to_string()).or_insert(0) += 1;
    }
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (p, l) in post.iter().zip(&labels) {
        let d = thresholds.decide(p);
        *confusion
            .entry(l.as_str().to_string())
            .or_default()
            .entry(d.as_str().to_string())
            .or_insert(0) += 1;
    }

    // Baselines: every scalar feature the inputs support.
    let cfg = if inputs.density.is_some() {
        FeatureConfig::all()
    } else {
        FeatureConfig::from_kinds(&[FeatureKind::Score])
    };
    let extractor = FeatureExtractor::new(cfg, model.temperatures, inputs.density)?;
    let breakdowns = rows
        .iter()
        .map(|r| extractor.breakdown(&inputs.labeled[r.index].record))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut baselines = Vec::new();
    for kind in FeatureKind::SCALARS {
        let values: Option<Vec<f64>> = breakdowns.iter().map(|b| b.scalar(kind)).collect();
        if let Some(v) = values {
            baselines.push(baseline_row(kind.title(), &v, &labels, kind.higher_is_id())?);
        }
    }

    // Detection AP on the validation images.
    let val_images: HashSet<&str> = inputs.validation_images.iter().map(String::as_str).collect();
    let live = Classifier::new(model, inputs.density)?;
    let det_extract = FeatureExtractor::new(FeatureConfig::from_kinds(&[FeatureKind::Score]), model.temperatures, None)?;
    let mut closed = Vec::new();
    let mut open = Vec::new();
    let mut records = Vec::new();
    for d in inputs.labeled.iter().filter(|d| val_images.contains(d.record.image_id.as_str())) {
        let calibrated = det_extract.breakdown(&d.record)?.calibrated_logits;
        let scored = ScoredDetection {
            image_id: d.record.image_id.clone(),
            bbox: d.record.bbox,
            class: argmax(&calibrated),
            confidence: score(&calibrated),
        };
        let decision = live.classify(&d.record)?;
        if matches!(decision, crate::fusion::Decision::Id | crate::fusion::Decision::Bg) {
            open.push(scored.clone());
        }
        closed.push(scored);
        records.push(&d.record);
    }
    let gts: Vec<_> = inputs
        .bundle
        .ground_truth
        .iter()
        .filter(|g| val_images.contains(g.image_id.as_str()))
        .cloned()
        .collect();
    let vocab = &inputs.bundle.vocabulary;
    let closed_ap = average_precision(&closed, &gts, vocab, inputs.ap_iou_threshold, inputs.interpolation)?;
    let open_ap = average_precision(&open, &gts, vocab, inputs.ap_iou_threshold, inputs.interpolation)?;

    let fps = if inputs.fps_runs > 0 && !records.is_empty() {
        let mut sink = 0usize;
        let t = measure_throughput(&records, inputs.fps_runs, |r| {
            if let Ok(d) = live.classify(r) {
                sink = sink.wrapping_add(d as usize);
            }
        })?;
        std::hint::black_box(sink);
        Some(t)
    } else {
        None
    };

    Ok(EvalReport {
        detections: rows.len(),
        counts,
        pruned: inputs.validation.header.pruned,
        auroc: a,
        auroc_bd: bd,
        pairwise,
        tpr_at_osr: tpr,
        closed_set_map: closed_ap.mean_ap,
        open_set_map: open_ap.mean_ap,
        fps,
        confusion,
        baselines,
        roc_curves,
        tau_ood: thresholds.tau_ood,
        escape_bound: thresholds.escape_bound,
        ood_escape: thresholds.ood_escape,
    })
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

/// Human-readable tables for a report.
pub fn render_report(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Detections evaluated: {} (pruned in source: {})", r.detections, r.pruned);
    let counts: Vec<String> = r.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let _ = writeln!(s, "Labels: {}", counts.join(" "));
    let _ = writeln!(s);
    let _ = writeln!(s, "Two-class separation (ID positive)");
    let _ = writeln!(s, "{:<12} {:>8} {:>9}", "Method", "AUROC", "AUROC_bd");
    let _ = writeln!(s, "{:<12} {:>8} {:>9}", "MLP", fmt3(r.auroc), fmt3(r.auroc_bd));
    for b in &r.baselines {
        let _ = writeln!(s, "{:<12} {:>8} {:>9}", b.feature, fmt3(b.auroc), fmt3(b.auroc_bd));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Three-class separation (macro pairwise AUROC)");
    let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8} {:>8}", "Method", "macro", "id/ood", "id/bg", "ood/bg");
    let mut row = |name: &str, p: &crate::metrics::PairwiseAuroc| {
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>8} {:>8} {:>8}",
            name,
            fmt3(p.macro_auroc),
            fmt3(p.id_ood),
            fmt3(p.id_bg),
            fmt3(p.ood_bg)
        );
    };
    if let Some(p) = &r.pairwise {
        row("MLP", p);
    }
    for b in &r.baselines {
        if let Some(p) = &b.pairwise {
            row(&b.feature, p);
        }
    }
    let _ = writeln!(s);
    let levels: Vec<String> = r.tpr_at_osr.iter().map(|(k, v)| format!("OSR {k}: {}", fmt3(*v))).collect();
    let _ = writeln!(s, "TPR at fixed OSR: {}", levels.join(", "));
    let _ = writeln!(
        s,
        "Decision rule: tau_ood = {:.4}, OOD escape {} (bound {})",
        r.tau_ood,
        fmt3(r.ood_escape),
        r.escape_bound
    );
    let _ = writeln!(s, "mAP closed-set: {}  open-set: {}", fmt3(r.closed_set_map), fmt3(r.open_set_map));
    match &r.fps {
        Some(t) => {
            let _ = writeln!(
                s,
                "Throughput: {:.0} detections/s (std {:.0}, {} runs of {} records)",
                t.mean, t.std, t.runs, t.records_per_run
            );
        }
        None => {
            let _ = writeln!(s, "Throughput: not measured");
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Confusion (true label -> decision)");
    for (truth, row) in &r.confusion {
        let cells: Vec<String> = row.iter().map(|(d, n)| format!("{d}={n}")).collect();
        let _ = writeln!(s, "  {truth}: {}", cells.join(" "));
    }
    s
}

/// Writes `report.json`, `report.txt` and one `roc_<name>.csv` per curve.
pub fn write_report_files(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::interchange::file_error(dir, e))?;
    let mut written = Vec::new();
    let json = dir.join(artifacts::REPORT_JSON);
    let mut f = create_file(&json)?;
    serde_json::to_writer_pretty(&mut f, report).map_err(std::io::Error::other).map_err(InterchangeError::from)?;
    std::io::Write::write_all(&mut f, b"\n").map_err(InterchangeError::from)?;
    drop(f);
    written.push(json);
    let txt = dir.join(artifacts::REPORT_TEXT);
    std::fs::write(&txt, render_report(report)).map_err(|e| crate::interchange::file_error(&txt, e))?;
    written.push(txt);
    for (name, curve) in &report.roc_curves {
        let p = dir.join(format!("roc_{name}.csv"));
        std::fs::write(&p, curve.to_csv()).map_err(|e| crate::interchange::file_error(&p, e))?;
        written.push(p);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::interchange::file_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| InterchangeError::ModelParse(e.to_string()).into())
}

pub fn read_labeled(path: &Path) -> Result<Vec<LabeledDetection>> {
    Ok(read_jsonl(open_file(path)?)?)
}

pub fn read_features(path: &Path) -> Result<FeatureSet> {
    Ok(FeatureSet::read(open_file(path)?)?)
}

pub fn write_features(set: &FeatureSet, path: &Path) -> Result<()> {
    set.write(create_file(path)?)?;
    Ok(())
}

struct Run<'a> {
    config: &'a PipelineConfig,
    dir: &'a Path,
}

impl Run<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn need(&self, stage: Stage, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::MissingArtifact {
                stage: stage.name(),
                path: p.display().to_string(),
            }
            .into())
        }
    }

    fn calibration_separate(&self) -> bool {
        self.config.calibration_bundle.is_some()
    }

    fn proxy(&self) -> Option<&Path> {
        match &self.config.ood_source {
            OodSource::TestSet => None,
            OodSource::Bundle(p) => Some(p),
        }
    }

    fn density(&self, stage: Stage) -> Result<Option<ClassDensityModel>> {
        let p = self.path(artifacts::DENSITY);
        if p.exists() {
            Ok(Some(read_model_file(&p)?))
        } else if self.config.features.needs_density() {
            Err(self.need(stage, artifacts::DENSITY).unwrap_err())
        } else {
            Ok(None)
        }
    }

    fn run_stage(&self, stage: Stage) -> Result<StageRecord> {
        let c = self.config;
        let mut outputs = Vec::new();
        let mut counts = BTreeMap::new();
        match stage {
            Stage::Match => {
                let mut jobs = vec![
                    (&c.train_bundle, artifacts::LABELED_TRAIN),
                    (&c.test_bundle, artifacts::LABELED_TEST),
                ];
                if let Some(p) = &c.calibration_bundle {
                    jobs.push((p, artifacts::LABELED_CALIBRATION));
                }
                let proxy = self.proxy().map(Path::to_path_buf);
                if let Some(p) = &proxy {
                    jobs.push((p, artifacts::LABELED_PROXY));
                }
                for (bundle_dir, name) in jobs {
                    let bundle = DatasetBundle::read_dir(bundle_dir)?;
                    let labeled = label_detections(&bundle.detections, &bundle.ground_truth, &bundle.vocabulary, c.iou_threshold)?;
                    for (l, n) in crate::matching::label_counts(&labeled) {
                        counts.insert(format!("{name}/{}", l.as_str()), n);
                    }
                    write_jsonl_file(&self.path(name), &labeled)?;
                    outputs.push(name);
                }
            }
            Stage::FitGmm => {
                if c.fit_gmm {
                    let bundle = DatasetBundle::read_dir(&c.train_bundle)?;
                    let labeled = read_labeled(&self.need(stage, artifacts::LABELED_TRAIN)?)?;
                    let samples = tp_id_samples(&labeled, &bundle.vocabulary);
                    counts.insert("tp_id_samples".into(), samples.len());
                    let model = fit_density_model(&bundle.vocabulary, &samples, &c.density_config())?;
                    write_model_file(&model, &self.path(artifacts::DENSITY))?;
                    outputs.push(artifacts::DENSITY);
                } else {
                    let p = self.path(artifacts::DENSITY);
                    if p.exists() {
                        std::fs::remove_file(&p).map_err(|e| crate::interchange::file_error(&p, e))?;
                    }
                }
            }
            Stage::Calibrate => {
                let (bundle_dir, name) = if self.calibration_separate() {
                    (c.calibration_bundle.as_ref().unwrap(), artifacts::LABELED_CALIBRATION)
                } else {
                    (&c.train_bundle, artifacts::LABELED_TRAIN)
                };
                let bundle = DatasetBundle::read_dir(bundle_dir)?;
                let labeled = read_labeled(&self.need(stage, name)?)?;
                let density = if c.calibrate_gmm {
                    let p = self.path(artifacts::DENSITY);
                    if p.exists() {
                        Some(read_model_file::<ClassDensityModel>(&p)?)
                    } else {
                        None
                    }
                } else {
                    None
                };
                let temps = calibrate_temperatures(&labeled, &bundle.vocabulary, density.as_ref())?;
                counts.insert("samples".into(), calibration_samples(&labeled, &bundle.vocabulary).len());
                let mut model = FusionModel::new(bundle.vocabulary.len(), temps);
                model.prune_threshold = c.prune_threshold;
                model.feature_config = Some(c.features);
                write_model_file(&model, &self.path(artifacts::FUSION_CALIBRATED))?;
                outputs.push(artifacts::FUSION_CALIBRATED);
            }
            Stage::BuildFeatures => {
                let model: FusionModel = read_model_file(&self.need(stage, artifacts::FUSION_CALIBRATED)?)?;
                let density = self.density(stage)?;
                let extractor = FeatureExtractor::new(c.features, model.temperatures, density.as_ref())?;
                let mut jobs = vec![
                    (artifacts::LABELED_TRAIN, artifacts::FEATURES_TRAIN),
                    (artifacts::LABELED_TEST, artifacts::FEATURES_TEST),
                ];
                if self.proxy().is_some() {
                    jobs.push((artifacts::LABELED_PROXY, artifacts::FEATURES_PROXY));
                }
                for (input, output) in jobs {
                    let labeled = read_labeled(&self.need(stage, input)?)?;
                    let set = build_feature_set(&labeled, &extractor, c.prune_threshold)?;
                    counts.insert(format!("{output}/rows"), set.rows.len());
                    counts.insert(format!("{output}/pruned"), set.header.pruned);
                    write_features(&set, &self.path(output))?;
                    outputs.push(output);
                }
            }
            Stage::Split => {
                let train = read_features(&self.need(stage, artifacts::FEATURES_TRAIN)?)?;
                let test = read_features(&self.need(stage, artifacts::FEATURES_TEST)?)?;
                let proxy = match self.proxy() {
                    Some(_) => Some(read_features(&self.need(stage, artifacts::FEATURES_PROXY)?)?),
                    None => None,
                };
                let bundle = DatasetBundle::read_dir(&c.test_bundle)?;
                let split = build_fusion_dataset(&train, &test, &bundle.images, proxy.as_ref(), &c.split_plan())?;
                counts = split.counts.clone();
                let p = self.path(artifacts::SPLIT);
                let json = serde_json::to_string_pretty(&split).map_err(std::io::Error::other).map_err(InterchangeError::from)?;
                std::fs::write(&p, json + "\n").map_err(|e| crate::interchange::file_error(&p, e))?;
                write_features(&split.train_set(&train, &test, proxy.as_ref()), &self.path(artifacts::TRAIN_FEATURES))?;
                write_features(&split.validation_set(&test), &self.path(artifacts::VALIDATION_FEATURES))?;
                outputs.extend([artifacts::SPLIT, artifacts::TRAIN_FEATURES, artifacts::VALIDATION_FEATURES]);
            }
            Stage::TrainMlp => {
                let mut model: FusionModel = read_model_file(&self.need(stage, artifacts::FUSION_CALIBRATED)?)?;
                let train = read_features(&self.need(stage, artifacts::TRAIN_FEATURES)?)?;
                let clf = train_fusion(&train, c.scheme, &c.training_config())?;
                counts.insert("epochs".into(), clf.training.epochs_run);
                counts.insert("samples".into(), clf.training.train_samples + clf.training.holdout_samples);
                model.classifier = Some(clf);
                write_model_file(&model, &self.path(artifacts::FUSION_TRAINED))?;
                outputs.push(artifacts::FUSION_TRAINED);
            }
            Stage::TuneThresholds => {
                let mut model: FusionModel = read_model_file(&self.need(stage, artifacts::FUSION_TRAINED)?)?;
                let val = read_features(&self.need(stage, artifacts::VALIDATION_FEATURES)?)?;
                let t = tune_on(model.classifier()?, &val, c.escape_bound)?;
                info!("tau_ood {:.6}: ID-TPR {:.4}, OOD escape {:.4}", t.tau_ood, t.id_tpr, t.ood_escape);
                model.thresholds = Some(t);
                write_model_file(&model, &self.path(artifacts::FUSION))?;
                outputs.push(artifacts::FUSION);
            }
            Stage::Evaluate => {
                let model: FusionModel = read_model_file(&self.need(stage, artifacts::FUSION)?)?;
                let density = self.density(stage)?;
                let val = read_features(&self.need(stage, artifacts::VALIDATION_FEATURES)?)?;
                let labeled = read_labeled(&self.need(stage, artifacts::LABELED_TEST)?)?;
                let split_text = std::fs::read_to_string(self.need(stage, artifacts::SPLIT)?).map_err(InterchangeError::from)?;
                let split: FusionSplit =
                    serde_json::from_str(&split_text).map_err(|e| InterchangeError::ModelParse(e.to_string()))?;
                let bundle = DatasetBundle::read_dir(&c.test_bundle)?;
                let report = evaluate(&EvalInputs {
                    model: &model,
                    density: density.as_ref(),
                    validation: &val,
                    labeled: &labeled,
                    bundle: &bundle,
                    validation_images: &split.validation_images,
                    ap_iou_threshold: c.ap_iou_threshold,
                    interpolation: c.ap_interpolation,
                    fps_runs: c.fps_runs,
                })?;
                write_report_files(&report, self.dir)?;
                // Throughput varies between runs, so only the deterministic
                // part of the report is hashed.
                let mut stable = report.clone();
                stable.fps = None;
                let p = self.path("report_stable.json");
                let json = serde_json::to_string_pretty(&stable).map_err(std::io::Error::other).map_err(InterchangeError::from)?;
                std::fs::write(&p, json + "\n").map_err(|e| crate::interchange::file_error(&p, e))?;
                outputs.push("report_stable.json");
            }
        }
        let mut hashes = BTreeMap::new();
        for name in outputs {
            hashes.insert(name.to_string(), sha256_file(&self.path(name))?);
        }
        Ok(StageRecord {
            stage,
            outputs: hashes,
            counts,
        })
    }
}

/// Runs the pipeline starting at `from` (default: the first stage) and
/// returns the evaluation report. Resuming checks the config fingerprint and
/// the hashes of all artifacts produced by earlier stages.
pub fn run_pipeline(config: &PipelineConfig, from: Option<Stage>) -> Result<EvalReport> {
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| crate::interchange::file_error(dir, e))?;
    let manifest_path = dir.join(artifacts::MANIFEST);
    let fingerprint = config.fingerprint();
    let from = from.unwrap_or(Stage::Match);
    let mut manifest = if from == Stage::Match {
        Manifest {
            config_fingerprint: fingerprint.clone(),
            seed: config.seed,
            stages: Vec::new(),
        }
    } else {
        if !manifest_path.exists() {
            return Err(PipelineError::NoManifest(dir.display().to_string()).into());
        }
        let m = Manifest::read(&manifest_path)?;
        if m.config_fingerprint != fingerprint {
            return Err(PipelineError::ConfigChanged.into());
        }
        m
    };
    manifest.stages.retain(|r| r.stage < from);
    for r in &manifest.stages {
        for (name, hash) in &r.outputs {
            let p = dir.join(name);
            if !p.exists() {
                return Err(PipelineError::MissingArtifact {
                    stage: from.name(),
                    path: p.display().to_string(),
                }
                .into());
            }
            if &sha256_file(&p)? != hash {
                return Err(PipelineError::HashMismatch {
                    path: p.display().to_string(),
                }
                .into());
            }
        }
    }
    if let Some(missing) = Stage::ALL.iter().filter(|s| **s < from).find(|s| !manifest.stages.iter().any(|r| r.stage == **s)) {
        return Err(PipelineError::MissingArtifact {
            stage: from.name(),
            path: format!("manifest record for stage {}", missing.name()),
        }
        .into());
    }
    let run = Run { config, dir };
    for stage in Stage::ALL.into_iter().filter(|s| *s >= from) {
        info!("stage {}", stage.name());
        let record = run.run_stage(stage).map_err(|e| e.in_stage(stage.name()))?;
        manifest.stages.push(record);
        manifest.write(&manifest_path)?;
    }
    read_report(&dir.join(artifacts::REPORT_JSON))
}

/// Whether an error came from an unsatisfiable constraint.
pub fn is_infeasible(e: &Error) -> bool {
    matches!(e.kind(), crate::error::ErrorKind::Infeasible)
}

impl From<FusionError> for PipelineError {
    fn from(e: FusionError) -> Self {
        PipelineError::Split(e.to_string())
    }
}
