//! Per-detection fusion features and score pruning.
//!
//! Feature order is fixed: `[score, entropy, density, gmm_entropy,
//! gmm_density, logits..., gmm_logits...]`, with disabled entries skipped.
//! Detector-side features use temperature-calibrated class logits, GMM-side
//! features use temperature-calibrated GMM logits. Pruning looks at the raw
//! (uncalibrated) logits.
//!
//! `density` is the log-sum-exp energy of the calibrated class logits;
//! `gmm_density` is the log-sum-exp (or max) over calibrated GMM logits.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::Temperatures;
use crate::density::{ClassDensityModel, DensityError};
use crate::interchange::{DetectionRecord, InterchangeError};
use crate::matching::{Collapsed, LabeledDetection};
use crate::numeric::{log_sum_exp, sigmoid, softmax_entropy};

pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.2;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature configuration enables no features")]
    EmptyConfig,
    #[error("unknown feature `{0}` (expected one of: score, entropy, density, gmm-entropy, gmm-density, logits, gmm-logits, all)")]
    UnknownFeature(String),
    #[error("GMM features are enabled but no density model was provided")]
    MissingDensityModel,
    #[error("detection has {found} logits, expected {expected}")]
    LogitLength { expected: usize, found: usize },
    #[error("density model has {density} classes but detections have {logits} logits")]
    ClassCount { density: usize, logits: usize },
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error("feature file: {0}")]
    File(String),
    #[error(transparent)]
    Interchange(#[from] InterchangeError),
}

/// Max over classes of the logistic of the logits.
pub fn score(logits: &[f64]) -> f64 {
    sigmoid(logits.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Shannon entropy (nats) of the softmax of the logits.
pub fn entropy(logits: &[f64]) -> f64 {
    softmax_entropy(logits)
}

/// `ln sum_c exp(logit_c)`.
pub fn energy_density(logits: &[f64]) -> f64 {
    log_sum_exp(logits)
}

pub fn gmm_entropy(gmm_logits: &[f64]) -> f64 {
    softmax_entropy(gmm_logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GmmDensityMode {
    #[default]
    LogSumExp,
    Max,
}

pub fn gmm_density(gmm_logits: &[f64], mode: GmmDensityMode) -> f64 {
    match mode {
        GmmDensityMode::LogSumExp => log_sum_exp(gmm_logits),
        GmmDensityMode::Max => gmm_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Retained iff the raw score is not below `threshold`.
pub fn is_retained(raw_logits: &[f64], threshold: f64) -> bool {
    score(raw_logits) >= threshold
}

pub fn prune(labeled: Vec<LabeledDetection>, threshold: f64) -> Vec<LabeledDetection> {
    labeled
        .into_iter()
        .filter(|d| is_retained(&d.record.class_logits, threshold))
        .collect()
}

/// The scalar feature families, in serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Score,
    Entropy,
    Density,
    GmmEntropy,
    GmmDensity,
    Logits,
    GmmLogits,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 7] = [
        FeatureKind::Score,
        FeatureKind::Entropy,
        FeatureKind::Density,
        FeatureKind::GmmEntropy,
        FeatureKind::GmmDensity,
        FeatureKind::Logits,
        FeatureKind::GmmLogits,
    ];

    /// The five single-value features used as threshold baselines.
    pub const SCALARS: [FeatureKind; 5] = [
        FeatureKind::Score,
        FeatureKind::Entropy,
        FeatureKind::Density,
        FeatureKind::GmmEntropy,
        FeatureKind::GmmDensity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Score => "score",
            FeatureKind::Entropy => "entropy",
            FeatureKind::Density => "density",
            FeatureKind::GmmEntropy => "gmm-entropy",
            FeatureKind::GmmDensity => "gmm-density",
            FeatureKind::Logits => "logits",
            FeatureKind::GmmLogits => "gmm-logits",
        }
    }

    /// Column heading used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            FeatureKind::Score => "Score",
            FeatureKind::Entropy => "Entropy",
            FeatureKind::Density => "Density",
            FeatureKind::GmmEntropy => "GMM Entr.",
            FeatureKind::GmmDensity => "GMM Dens.",
            FeatureKind::Logits => "Logits",
            FeatureKind::GmmLogits => "GMM Logits",
        }
    }

    pub fn is_gmm(self) -> bool {
        matches!(
            self,
            FeatureKind::GmmEntropy | FeatureKind::GmmDensity | FeatureKind::GmmLogits
        )
    }

    /// Whether larger values indicate an in-distribution detection.
    pub fn higher_is_id(self) -> bool {
        !matches!(self, FeatureKind::Entropy | FeatureKind::GmmEntropy)
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, FeatureError> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        let norm = norm.trim_end_matches('.');
        match norm {
            "score" => Ok(FeatureKind::Score),
            "entropy" => Ok(FeatureKind::Entropy),
            "density" => Ok(FeatureKind::Density),
            "gmm-entropy" | "gmm-entr" => Ok(FeatureKind::GmmEntropy),
            "gmm-density" | "gmm-dens" => Ok(FeatureKind::GmmDensity),
            "logits" => Ok(FeatureKind::Logits),
            "gmm-logits" => Ok(FeatureKind::GmmLogits),
            _ => Err(FeatureError::UnknownFeature(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub score: bool,
    pub entropy: bool,
    pub density: bool,
    pub gmm_entropy: bool,
    pub gmm_density: bool,
    pub logits: bool,
    pub gmm_logits: bool,
    #[serde(default)]
    pub gmm_density_mode: GmmDensityMode,
}

impl FeatureConfig {
    pub fn all() -> Self {
        FeatureConfig::from_kinds(&FeatureKind::ALL)
    }

    pub fn from_kinds(kinds: &[FeatureKind]) -> Self {
        let mut c = FeatureConfig::default();
        for k in kinds {
            c.set(*k, true);
        }
        c
    }

    /// Parses a comma-separated list such as `score,entropy,gmm-entropy` or `all`.
    pub fn parse_list(list: &str) -> Result<Self, FeatureError> {
        let mut c = FeatureConfig::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if item.eq_ignore_ascii_case("all") {
                c = FeatureConfig {
                    gmm_density_mode: c.gmm_density_mode,
                    ..FeatureConfig::all()
                };
            } else {
                c.set(item.parse()?, true);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, kind: FeatureKind, on: bool) {
        match kind {
            FeatureKind::Score => self.score = on,
            FeatureKind::Entropy => self.entropy = on,
            FeatureKind::Density => self.density = on,
            FeatureKind::GmmEntropy => self.gmm_entropy = on,
            FeatureKind::GmmDensity => self.gmm_density = on,
            FeatureKind::Logits => self.logits = on,
            FeatureKind::GmmLogits => self.gmm_logits = on,
        }
    }

    pub fn is_enabled(&self, kind: FeatureKind) -> bool {
        match kind {
            FeatureKind::Score => self.score,
            FeatureKind::Entropy => self.entropy,
            FeatureKind::Density => self.density,
            FeatureKind::GmmEntropy => self.gmm_entropy,
            FeatureKind::GmmDensity => self.gmm_density,
            FeatureKind::Logits => self.logits,
            FeatureKind::GmmLogits => self.gmm_logits,
        }
    }

    pub fn enabled(&self) -> Vec<FeatureKind> {
        FeatureKind::ALL.into_iter().filter(|k| self.is_enabled(*k)).collect()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.enabled().is_empty() {
            Err(FeatureError::EmptyConfig)
        } else {
            Ok(())
        }
    }

    pub fn needs_density(&self) -> bool {
        self.enabled().iter().any(|k| k.is_gmm())
    }

    /// Vector length for `num_classes` ID classes.
    pub fn len(&self, num_classes: usize) -> usize {
        self.enabled()
            .iter()
            .map(|k| match k {
                FeatureKind::Logits | FeatureKind::GmmLogits => num_classes,
                _ => 1,
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.enabled().is_empty()
    }

    /// Column names, e.g. `score`, `logits[0]`.
    pub fn column_names(&self, num_classes: usize) -> Vec<String> {
        let mut names = Vec::new();
        for k in self.enabled() {
            match k {
                FeatureKind::Logits | FeatureKind::GmmLogits => {
                    names.extend((0..num_classes).map(|c| format!("{}[{c}]", k.name())))
                }
                _ => names.push(k.name().to_string()),
            }
        }
        names
    }

    pub fn describe(&self) -> String {
        self.enabled().iter().map(|k| k.title()).collect::<Vec<_>>().join("+")
    }
}

/// Assembled fusion input for one detection.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub label: Option<Collapsed>,
}

/// Every feature family for one detection, before selection.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBreakdown {
    pub score: f64,
    pub entropy: f64,
    pub density: f64,
    pub calibrated_logits: Vec<f64>,
    pub gmm: Option<GmmFeatures>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFeatures {
    pub entropy: f64,
    pub density: f64,
    pub calibrated_logits: Vec<f64>,
}

impl FeatureBreakdown {
    /// Value of a single scalar feature; `None` for vector families or
    /// missing GMM inputs.
    pub fn scalar(&self, kind: FeatureKind) -> Option<f64> {
        match kind {
            FeatureKind::Score => Some(self.score),
            FeatureKind::Entropy => Some(self.entropy),
            FeatureKind::Density => Some(self.density),
            FeatureKind::GmmEntropy => self.gmm.as_ref().map(|g| g.entropy),
            FeatureKind::GmmDensity => self.gmm.as_ref().map(|g| g.density),
            FeatureKind::Logits | FeatureKind::GmmLogits => None,
        }
    }
}

/// Computes feature vectors for a fixed configuration.
#[derive(Debug, Clone, Copy)]
pub struct FeatureExtractor<'a> {
    pub config: FeatureConfig,
    pub temperatures: Temperatures,
    pub density: Option<&'a ClassDensityModel>,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(
        config: FeatureConfig,
        temperatures: Temperatures,
        density: Option<&'a ClassDensityModel>,
    ) -> Result<Self, FeatureError> {
        config.validate()?;
        if config.needs_density() && density.is_none() {
            return Err(FeatureError::MissingDensityModel);
        }
        Ok(FeatureExtractor {
            config,
            temperatures,
            density,
        })
    }

    /// Computes every family available with the given inputs.
    pub fn breakdown(&self, record: &DetectionRecord) -> Result<FeatureBreakdown, FeatureError> {
        let logits = self.temperatures.detector.apply(&record.class_logits);
        let gmm = match self.density {
            Some(model) => {
                if model.num_classes() != record.class_logits.len() {
                    return Err(FeatureError::ClassCount {
                        density: model.num_classes(),
                        logits: record.class_logits.len(),
                    });
                }
                let raw = model.gmm_log_likelihoods(&record.embedding)?;
                let calibrated = match &self.temperatures.gmm {
                    Some(t) => t.apply(&raw),
                    None => raw,
                };
                Some(GmmFeatures {
                    entropy: gmm_entropy(&calibrated),
                    density: gmm_density(&calibrated, self.config.gmm_density_mode),
                    calibrated_logits: calibrated,
                })
            }
            None => None,
        };
        Ok(FeatureBreakdown {
            score: score(&logits),
            entropy: entropy(&logits),
            density: energy_density(&logits),
            calibrated_logits: logits,
            gmm,
        })
    }

    pub fn assemble(&self, record: &DetectionRecord) -> Result<Vec<f64>, FeatureError> {
        let b = self.breakdown(record)?;
        let c = &self.config;
        let mut out = Vec::with_capacity(c.len(record.class_logits.len()));
        let gmm = || b.gmm.as_ref().ok_or(FeatureError::MissingDensityModel);
        if c.score {
            out.push(b.score);
        }
        if c.entropy {
            out.push(b.entropy);
        }
        if c.density {
            out.push(b.density);
        }
        if c.gmm_entropy {
            out.push(gmm()?.entropy);
        }
        if c.gmm_density {
            out.push(gmm()?.density);
        }
        if c.logits {
            out.extend_from_slice(&b.calibrated_logits);
        }
        if c.gmm_logits {
            out.extend_from_slice(&gmm()?.calibrated_logits);
        }
        Ok(out)
    }
}

pub fn assemble_features(
    record: &DetectionRecord,
    density: Option<&ClassDensityModel>,
    temperatures: &Temperatures,
    config: &FeatureConfig,
) -> Result<FeatureVector, FeatureError> {
    let extractor = FeatureExtractor::new(*config, *temperatures, density)?;
    Ok(FeatureVector {
        values: extractor.assemble(record)?,
        label: None,
    })
}

/// One line of a feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    /// Position of the detection in its labeled-detection file.
    pub index: usize,
    pub image_id: String,
    pub features: Vec<f64>,
    pub label: Collapsed,
}

/// First line of a feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFileHeader {
    pub format: String,
    pub version: u32,
    pub config: FeatureConfig,
    pub num_classes: usize,
    pub columns: Vec<String>,
    /// Detections dropped by score pruning before feature extraction.
    pub pruned: usize,
}

pub const FEATURE_FORMAT: &str = "openset.features";
pub const FEATURE_VERSION: u32 = 1;

impl FeatureFileHeader {
    pub fn new(config: FeatureConfig, num_classes: usize, pruned: usize) -> Self {
        FeatureFileHeader {
            format: FEATURE_FORMAT.to_string(),
            version: FEATURE_VERSION,
            config,
            num_classes,
            columns: config.column_names(num_classes),
            pruned,
        }
    }

    pub fn feature_len(&self) -> usize {
        self.config.len(self.num_classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub header: FeatureFileHeader,
    pub rows: Vec<FeatureRow>,
}

impl FeatureSet {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), FeatureError> {
        let io = |e: std::io::Error| FeatureError::Interchange(e.into());
        serde_json::to_writer(&mut w, &self.header).map_err(|e| FeatureError::File(e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
        crate::interchange::write_jsonl(w, &self.rows)?;
        Ok(())
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self, FeatureError> {
        let mut first = String::new();
        r.read_line(&mut first)
            .map_err(|e| FeatureError::Interchange(e.into()))?;
        let header: FeatureFileHeader =
            serde_json::from_str(first.trim()).map_err(|e| FeatureError::File(format!("header: {e}")))?;
        if header.format != FEATURE_FORMAT {
            return Err(FeatureError::File(format!("unexpected format `{}`", header.format)));
        }
        if header.version != FEATURE_VERSION {
            return Err(FeatureError::File(format!("unsupported version {}", header.version)));
        }
        header.config.validate()?;
        let rows: Vec<FeatureRow> = crate::interchange::read_jsonl(r)?;
        let len = header.feature_len();
        for (i, row) in rows.iter().enumerate() {
            if row.features.len() != len {
                return Err(FeatureError::File(format!(
                    "row {}: {} features, header declares {len}",
                    i + 2,
                    row.features.len()
                )));
            }
            if row.features.iter().any(|v| !v.is_finite()) {
                return Err(FeatureError::File(format!("row {}: non-finite feature", i + 2)));
            }
        }
        Ok(FeatureSet { header, rows })
    }
}

/// Prunes, then assembles features for every retained labeled detection.
pub fn build_feature_set(
    labeled: &[LabeledDetection],
    extractor: &FeatureExtractor<'_>,
    prune_threshold: f64,
) -> Result<FeatureSet, FeatureError> {
    let num_classes = labeled.first().map_or(0, |d| d.record.class_logits.len());
    let mut rows = Vec::with_capacity(labeled.len());
    let mut pruned = 0;
    for (index, d) in labeled.iter().enumerate() {
        if d.record.class_logits.len() != num_classes {
            return Err(FeatureError::LogitLength {
                expected: num_classes,
                found: d.record.class_logits.len(),
            });
        }
        if !is_retained(&d.record.class_logits, prune_threshold) {
            pruned += 1;
            continue;
        }
        rows.push(FeatureRow {
            index,
            image_id: d.record.image_id.clone(),
            features: extractor.assemble(&d.record)?,
            label: d.label.collapsed(),
        });
    }
    Ok(FeatureSet {
        header: FeatureFileHeader::new(extractor.config, num_classes, pruned),
        rows,
    })
}
