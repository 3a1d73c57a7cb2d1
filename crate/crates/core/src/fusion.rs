//! Fusion classifier: a small rectifier MLP over standardized features, the
//! OOD-posterior threshold rule and the persisted fusion model.
//!
//! Class indices are 0 = ID, 1 = OOD and, for three classes, 2 = BG.
//! Training minimizes class-weighted softmax cross-entropy with momentum SGD.
//! All reductions run in a fixed order, so a given seed reproduces the same
//! weights bit for bit.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::Temperatures;
use crate::density::ClassDensityModel;
use crate::features::{is_retained, FeatureConfig, FeatureError, FeatureExtractor, DEFAULT_PRUNE_THRESHOLD};
use crate::interchange::{DetectionRecord, ModelFormat};
use crate::matching::Collapsed;
use crate::numeric::{log_sum_exp, softmax_into};
use crate::rng::{substream, StageRng};

pub const OOD_INDEX: usize = 1;
pub const DEFAULT_ESCAPE_BOUND: f64 = 0.2;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("no training samples")]
    Empty,
    #[error("class count must be 2 or 3, got {0}")]
    ClassCount(usize),
    #[error("class {0} has no samples")]
    MissingClass(&'static str),
    #[error("sample {index}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("{features} feature vectors but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("feature vector has length {found}, expected {expected}")]
    FeatureLength { expected: usize, found: usize },
    #[error("sample {0}: non-finite feature")]
    NonFinite(usize),
    #[error("invalid hyperparameter: {0}")]
    Hyperparameter(String),
    #[error("escape bound {bound} cannot be met; the least achievable OOD-escape rate is {least}")]
    InfeasibleBound { bound: f64, least: f64 },
    #[error("fusion model is missing its {0}")]
    Incomplete(&'static str),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type Result<T, E = FusionError> = std::result::Result<T, E>;

/// How the collapsed labels map onto network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassScheme {
    /// ID, OOD, BG.
    #[default]
    ThreeClass,
    /// ID vs OOD; BG samples are left out of training.
    TwoClass,
    /// ID vs OOD with BG counted as OOD.
    TwoClassBgAsOod,
}

impl ClassScheme {
    pub fn from_classes(k: usize, bg_as_ood: bool) -> Result<Self> {
        match (k, bg_as_ood) {
            (3, _) => Ok(ClassScheme::ThreeClass),
            (2, false) => Ok(ClassScheme::TwoClass),
            (2, true) => Ok(ClassScheme::TwoClassBgAsOod),
            (k, _) => Err(FusionError::ClassCount(k)),
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            ClassScheme::ThreeClass => 3,
            _ => 2,
        }
    }

    /// Output index used for training; `None` for samples left out.
    pub fn encode(self, label: Collapsed) -> Option<usize> {
        match (self, label) {
            (_, Collapsed::Id) => Some(0),
            (_, Collapsed::Ood) => Some(1),
            (ClassScheme::ThreeClass, Collapsed::Bg) => Some(2),
            (ClassScheme::TwoClass, Collapsed::Bg) => None,
            (ClassScheme::TwoClassBgAsOod, Collapsed::Bg) => Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(features: &[Vec<f64>]) -> Self {
        let d = features.first().map_or(0, Vec::len);
        let n = features.len() as f64;
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Standardization { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Standardization {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (((o, v), m), s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.std) {
            *o = (v - m) / s;
        }
    }
}

/// Fully connected layer; `weights[i * outputs + j]` connects input `i` to output `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    /// `out = b + x W` for one row.
    fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.biases);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.outputs..(i + 1) * self.outputs];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParameters {
    pub layers: Vec<DenseLayer>,
    pub standardization: Standardization,
}

/// Gradient with the same layout as [`MlpParameters::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<DenseLayer>,
}

impl Gradient {
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[DenseLayer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.biases);
    }
    out
}

impl MlpParameters {
    /// All-zero network with identity standardization.
    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect();
        MlpParameters {
            layers,
            standardization: Standardization::identity(sizes[0]),
        }
    }

    /// He-normal weights, zero biases.
    pub fn he_init(sizes: &[usize], rng: &mut StageRng) -> Self {
        let mut p = MlpParameters::zeros(sizes);
        for l in &mut p.layers {
            let normal = Normal::new(0.0, (2.0 / l.inputs as f64).sqrt()).expect("positive std");
            for w in &mut l.weights {
                *w = normal.sample(rng);
            }
        }
        p
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_len()];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_parameters(), "flat parameter length");
        let mut at = 0;
        for l in &mut self.layers {
            let (w, b) = (l.weights.len(), l.biases.len());
            l.weights.copy_from_slice(&flat[at..at + w]);
            l.biases.copy_from_slice(&flat[at + w..at + w + b]);
            at += w + b;
        }
    }

    pub fn check(&self) -> std::result::Result<(), String> {
        if self.layers.is_empty() {
            return Err("network has no layers".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(format!("layer {i}: parameter shape does not match {}x{}", l.inputs, l.outputs));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(format!("layer {i}: input size does not chain"));
            }
        }
        if !matches!(self.num_classes(), 2 | 3) {
            return Err(format!("output size must be 2 or 3, got {}", self.num_classes()));
        }
        let s = &self.standardization;
        if s.mean.len() != self.input_len() || s.std.len() != self.input_len() {
            return Err("standardization length does not match input".into());
        }
        if s.std.iter().any(|v| !(*v >= STD_FLOOR)) {
            return Err("standard deviations must be at least the floor".into());
        }
        Ok(())
    }

    /// Logits for already standardized inputs.
    pub fn forward_standardized(&self, z: &[f64]) -> Vec<f64> {
        let mut cur = z.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            next.resize(l.outputs, 0.0);
            l.forward_row(&cur, &mut next);
            if li != last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_len() {
            return Err(FusionError::FeatureLength {
                expected: self.input_len(),
                found: x.len(),
            });
        }
        let mut z = vec![0.0; x.len()];
        self.standardization.apply_into(x, &mut z);
        Ok(self.forward_standardized(&z))
    }

    pub fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        let logits = self.forward(x)?;
        let mut p = vec![0.0; logits.len()];
        softmax_into(&logits, &mut p);
        Ok(p)
    }

    /// Weighted mean cross-entropy `sum_b w_b CE_b / sum_b w_b` over a batch of
    /// standardized rows (row-major in `z`) and its gradient.
    pub fn loss_and_gradient(&self, z: &[f64], labels: &[usize], weights: &[f64]) -> (f64, Gradient) {
        let mut ws = Workspace::new(self);
        let mut grad = Gradient {
            layers: self.layers.iter().map(|l| DenseLayer::zeros(l.inputs, l.outputs)).collect(),
        };
        let loss = ws.loss_and_gradient(self, z, labels, weights, &mut grad);
        (loss, grad)
    }

    /// Weighted mean cross-entropy without gradient.
    pub fn loss(&self, z: &[f64], labels: &[usize], weights: &[f64]) -> f64 {
        let d = self.input_len();
        let mut total = 0.0;
        let mut wsum = 0.0;
        for (b, (&y, &w)) in labels.iter().zip(weights).enumerate() {
            let logits = self.forward_standardized(&z[b * d..(b + 1) * d]);
            total += w * (log_sum_exp(&logits) - logits[y]);
            wsum += w;
        }
        total / wsum
    }
}

/// Reusable activation buffers for batched backpropagation.
struct Workspace {
    /// Post-activation values per layer input, batch-major.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    probs: Vec<f64>,
}

impl Workspace {
    fn new(p: &MlpParameters) -> Self {
        Workspace {
            acts: vec![Vec::new(); p.layers.len() + 1],
            delta: Vec::new(),
            delta_prev: Vec::new(),
            probs: vec![0.0; p.num_classes()],
        }
    }

    fn loss_and_gradient(
        &mut self,
        p: &MlpParameters,
        z: &[f64],
        labels: &[usize],
        weights: &[f64],
        grad: &mut Gradient,
    ) -> f64 {
        let n = labels.len();
        let last = p.layers.len() - 1;
        self.acts[0].clear();
        self.acts[0].extend_from_slice(z);
        for (li, l) in p.layers.iter().enumerate() {
            let (head, tail) = self.acts.split_at_mut(li + 1);
            let input = &head[li];
            let out = &mut tail[0];
            out.resize(n * l.outputs, 0.0);
            for b in 0..n {
                let row = &mut out[b * l.outputs..(b + 1) * l.outputs];
                l.forward_row(&input[b * l.inputs..(b + 1) * l.inputs], row);
                if li != last {
                    row.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
        }

        let k = p.num_classes();
        let wsum: f64 = weights.iter().sum();
        let mut loss = 0.0;
        self.delta.resize(n * k, 0.0);
        let logits = &self.acts[last + 1];
        for b in 0..n {
            let row = &logits[b * k..(b + 1) * k];
            let y = labels[b];
            loss += weights[b] * (log_sum_exp(row) - row[y]);
            softmax_into(row, &mut self.probs);
            let scale = weights[b] / wsum;
            for c in 0..k {
                let target = if c == y { 1.0 } else { 0.0 };
                self.delta[b * k + c] = scale * (self.probs[c] - target);
            }
        }

        for g in &mut grad.layers {
            g.weights.iter_mut().for_each(|v| *v = 0.0);
            g.biases.iter_mut().for_each(|v| *v = 0.0);
        }
        for li in (0..=last).rev() {
            let l = &p.layers[li];
            let g = &mut grad.layers[li];
            let input = &self.acts[li];
            let (ni, no) = (l.inputs, l.outputs);
            for b in 0..n {
                let d = &self.delta[b * no..(b + 1) * no];
                for (gb, dv) in g.biases.iter_mut().zip(d) {
                    *gb += dv;
                }
                let x = &input[b * ni..(b + 1) * ni];
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let gw = &mut g.weights[i * no..(i + 1) * no];
                    for (gv, dv) in gw.iter_mut().zip(d) {
                        *gv += xi * dv;
                    }
                }
            }
            if li == 0 {
                break;
            }
            self.delta_prev.resize(n * ni, 0.0);
            for b in 0..n {
                let d = &self.delta[b * no..(b + 1) * no];
                let x = &input[b * ni..(b + 1) * ni];
                for i in 0..ni {
                    self.delta_prev[b * ni + i] = if x[i] > 0.0 {
                        let row = &l.weights[i * no..(i + 1) * no];
                        row.iter().zip(d).map(|(w, dv)| w * dv).sum()
                    } else {
                        0.0
                    };
                }
            }
            std::mem::swap(&mut self.delta, &mut self.delta_prev);
        }
        loss / wsum
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without holdout improvement before stopping; 0 disables.
    pub patience: usize,
    /// Fraction of each class held out for early stopping.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            hidden: vec![32, 32],
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 256,
            max_epochs: 200,
            patience: 20,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FusionError::Hyperparameter(m.to_string()));
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout fraction must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub seed: u64,
    pub epochs_run: usize,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub class_weights: Vec<f64>,
    /// Mean weighted training loss per epoch, averaged over mini-batches.
    pub train_loss: Vec<f64>,
    /// Holdout loss per epoch; empty without a holdout.
    pub holdout_loss: Vec<f64>,
    pub train_samples: usize,
    pub holdout_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMlp {
    pub parameters: MlpParameters,
    pub report: TrainingReport,
}

/// `n / (K n_c)` per class.
pub fn inverse_frequency_weights(labels: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &y in labels {
        counts[y] += 1;
    }
    counts
        .iter()
        .map(|&c| labels.len() as f64 / (k as f64 * c as f64))
        .collect()
}

fn class_name(k: usize, c: usize) -> &'static str {
    match (k, c) {
        (_, 0) => "ID",
        (_, 1) => "OOD",
        _ => "BG",
    }
}

pub fn train_mlp(features: &[Vec<f64>], labels: &[usize], k: usize, config: &TrainingConfig) -> Result<TrainedMlp> {
    config.validate()?;
    if !matches!(k, 2 | 3) {
        return Err(FusionError::ClassCount(k));
    }
    if features.len() != labels.len() {
        return Err(FusionError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(FusionError::Empty);
    }
    let d = features[0].len();
    if d == 0 {
        return Err(FusionError::FeatureLength { expected: 1, found: 0 });
    }
    let mut counts = vec![0usize; k];
    for (index, (f, &y)) in features.iter().zip(labels).enumerate() {
        if f.len() != d {
            return Err(FusionError::FeatureLength { expected: d, found: f.len() });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite(index));
        }
        if y >= k {
            return Err(FusionError::LabelOutOfRange { index, label: y, classes: k });
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(FusionError::MissingClass(class_name(k, c)));
    }

    let mut holdout_rng = substream(config.seed, "mlp-holdout");
    let mut train_idx = Vec::new();
    let mut hold_idx = Vec::new();
    for c in 0..k {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut holdout_rng);
        let held = ((members.len() as f64) * config.holdout_fraction).floor() as usize;
        let held = held.min(members.len() - 1);
        hold_idx.extend_from_slice(&members[..held]);
        train_idx.extend_from_slice(&members[held..]);
    }
    train_idx.sort_unstable();
    hold_idx.sort_unstable();

    let train_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| features[i].clone()).collect();
    let standardization = Standardization::fit(&train_rows);
    let standardize = |idx: &[usize]| {
        let mut z = vec![0.0; idx.len() * d];
        for (r, &i) in idx.iter().enumerate() {
            standardization.apply_into(&features[i], &mut z[r * d..(r + 1) * d]);
        }
        z
    };
    let z_train = standardize(&train_idx);
    let z_hold = standardize(&hold_idx);
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let y_hold: Vec<usize> = hold_idx.iter().map(|&i| labels[i]).collect();
    let class_weights = inverse_frequency_weights(&y_train, k);
    let w_train: Vec<f64> = y_train.iter().map(|&y| class_weights[y]).collect();
    let w_hold: Vec<f64> = y_hold.iter().map(|&y| class_weights[y]).collect();

    let mut sizes = vec![d];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(k);
    let mut init_rng = substream(config.seed, "mlp-init");
    let mut params = MlpParameters::he_init(&sizes, &mut init_rng);
    params.standardization = standardization.clone();

    let mut velocity: Vec<DenseLayer> = params
        .layers
        .iter()
        .map(|l| DenseLayer::zeros(l.inputs, l.outputs))
        .collect();
    let mut grad = Gradient { layers: velocity.clone() };
    let mut ws = Workspace::new(&params);
    let mut shuffle_rng = substream(config.seed, "mlp-shuffle");

    let n = y_train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut zb = Vec::with_capacity(config.batch_size * d);
    let mut yb = Vec::with_capacity(config.batch_size);
    let mut wb = Vec::with_capacity(config.batch_size);
    let mut report = TrainingReport {
        seed: config.seed,
        epochs_run: 0,
        best_epoch: 0,
        stopped_early: false,
        class_weights: class_weights.clone(),
        train_loss: Vec::new(),
        holdout_loss: Vec::new(),
        train_samples: n,
        holdout_samples: y_hold.len(),
    };
    let mut best = (f64::INFINITY, params.clone());
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_weight = 0.0;
        for chunk in order.chunks(config.batch_size) {
            zb.clear();
            yb.clear();
            wb.clear();
            for &i in chunk {
                zb.extend_from_slice(&z_train[i * d..(i + 1) * d]);
                yb.push(y_train[i]);
                wb.push(w_train[i]);
            }
            let batch_loss = ws.loss_and_gradient(&params, &zb, &yb, &wb, &mut grad);
            let bw: f64 = wb.iter().sum();
            epoch_loss += batch_loss * bw;
            epoch_weight += bw;
            for ((p, v), g) in params.layers.iter_mut().zip(&mut velocity).zip(&grad.layers) {
                for ((pw, vw), gw) in p.weights.iter_mut().zip(&mut v.weights).zip(&g.weights) {
                    *vw = config.momentum * *vw - config.learning_rate * gw;
                    *pw += *vw;
                }
                for ((pb, vb), gb) in p.biases.iter_mut().zip(&mut v.biases).zip(&g.biases) {
                    *vb = config.momentum * *vb - config.learning_rate * gb;
                    *pb += *vb;
                }
            }
        }
        let train_loss = epoch_loss / epoch_weight;
        report.train_loss.push(train_loss);
        report.epochs_run = epoch;
        let monitored = if y_hold.is_empty() {
            train_loss
        } else {
            let l = params.loss(&z_hold, &y_hold, &w_hold);
            report.holdout_loss.push(l);
            l
        };
        if !monitored.is_finite() {
            return Err(FusionError::Hyperparameter(format!(
                "training diverged at epoch {epoch}; lower the learning rate"
            )));
        }
        if monitored < best.0 {
            best = (monitored, params.clone());
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                report.stopped_early = true;
                debug!("early stop at epoch {epoch}, best epoch {}", report.best_epoch);
                break;
            }
        }
    }
    info!(
        "trained {}-class MLP on {} samples for {} epochs (best {})",
        k, n, report.epochs_run, report.best_epoch
    );
    Ok(TrainedMlp {
        parameters: best.1,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    TwoClass,
    ThreeClass,
}

impl RuleKind {
    pub fn for_classes(k: usize) -> Result<Self> {
        match k {
            2 => Ok(RuleKind::TwoClass),
            3 => Ok(RuleKind::ThreeClass),
            k => Err(FusionError::ClassCount(k)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Id,
    Ood,
    Bg,
    /// Dropped by score pruning before classification.
    Suppressed,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Id => "ID",
            Decision::Ood => "OOD",
            Decision::Bg => "BG",
            Decision::Suppressed => "SUPPRESSED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionThresholds {
    pub rule: RuleKind,
    pub tau_ood: f64,
    pub escape_bound: f64,
    /// ID true-positive rate on the tuning split.
    pub id_tpr: f64,
    /// Fraction of OOD tuning samples not declared OOD.
    pub ood_escape: f64,
}

impl DecisionThresholds {
    /// Applies the rule to a posterior vector.
    pub fn decide(&self, posterior: &[f64]) -> Decision {
        decide(self.rule, self.tau_ood, posterior)
    }
}

/// OOD iff `posterior[OOD] >= tau`; otherwise ID, or for three classes the
/// larger of ID and BG (ID on ties).
pub fn decide(rule: RuleKind, tau: f64, posterior: &[f64]) -> Decision {
    if posterior[OOD_INDEX] >= tau {
        Decision::Ood
    } else {
        match rule {
            RuleKind::TwoClass => Decision::Id,
            RuleKind::ThreeClass if posterior[2] > posterior[0] => Decision::Bg,
            RuleKind::ThreeClass => Decision::Id,
        }
    }
}

/// Picks `tau_ood` among the distinct OOD posteriors: maximal ID-TPR subject
/// to OOD-escape `<= bound`, then minimal escape, then the largest tau.
pub fn tune_thresholds(posteriors: &[Vec<f64>], labels: &[Collapsed], rule: RuleKind, bound: f64) -> Result<DecisionThresholds> {
    if posteriors.len() != labels.len() {
        return Err(FusionError::LengthMismatch {
            features: posteriors.len(),
            labels: labels.len(),
        });
    }
    if !bound.is_finite() || bound > 1.0 {
        return Err(FusionError::Hyperparameter(format!("escape bound must be at most 1, got {bound}")));
    }
    let k = match rule {
        RuleKind::TwoClass => 2,
        RuleKind::ThreeClass => 3,
    };
    for (index, p) in posteriors.iter().enumerate() {
        if p.len() != k {
            return Err(FusionError::FeatureLength { expected: k, found: p.len() });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite(index));
        }
    }
    let n_ood = labels.iter().filter(|&&l| l == Collapsed::Ood).count();
    let n_id = labels.iter().filter(|&&l| l == Collapsed::Id).count();
    if n_ood == 0 {
        return Err(FusionError::MissingClass("OOD"));
    }
    if n_id == 0 {
        return Err(FusionError::MissingClass("ID"));
    }

    // Sweep tau upward through the sorted OOD posteriors; a sample is below
    // tau (not declared OOD) once tau exceeds its posterior.
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| posteriors[a][OOD_INDEX].total_cmp(&posteriors[b][OOD_INDEX]));
    let mut escaped = 0usize;
    let mut id_accepted = 0usize;
    let mut best: Option<(usize, usize, f64)> = None;
    let mut i = 0;
    while i < order.len() {
        let tau = posteriors[order[i]][OOD_INDEX];
        if escaped as f64 <= bound * n_ood as f64 {
            let better = match best {
                None => true,
                Some((acc, esc, _)) => id_accepted > acc || (id_accepted == acc && escaped <= esc),
            };
            if better {
                best = Some((id_accepted, escaped, tau));
            }
        }
        while i < order.len() && posteriors[order[i]][OOD_INDEX] == tau {
            let s = order[i];
            match labels[s] {
                Collapsed::Ood => escaped += 1,
                Collapsed::Id => {
                    if decide(rule, f64::INFINITY, &posteriors[s]) == Decision::Id {
                        id_accepted += 1;
                    }
                }
                Collapsed::Bg => {}
            }
            i += 1;
        }
    }
    let (acc, esc, tau) = best.ok_or(FusionError::InfeasibleBound { bound, least: 0.0 })?;
    Ok(DecisionThresholds {
        rule,
        tau_ood: tau,
        escape_bound: bound,
        id_tpr: acc as f64 / n_id as f64,
        ood_escape: esc as f64 / n_ood as f64,
    })
}

/// MLP with the label scheme it was trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionClassifier {
    pub scheme: ClassScheme,
    pub parameters: MlpParameters,
    pub training: TrainingReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub num_classes: usize,
    pub feature_config: Option<FeatureConfig>,
    pub prune_threshold: f64,
    pub temperatures: Temperatures,
    pub classifier: Option<FusionClassifier>,
    pub thresholds: Option<DecisionThresholds>,
}

impl FusionModel {
    pub fn new(num_classes: usize, temperatures: Temperatures) -> Self {
        FusionModel {
            num_classes,
            feature_config: None,
            prune_threshold: DEFAULT_PRUNE_THRESHOLD,
            temperatures,
            classifier: None,
            thresholds: None,
        }
    }

    pub fn config(&self) -> Result<&FeatureConfig> {
        self.feature_config.as_ref().ok_or(FusionError::Incomplete("feature configuration"))
    }

    pub fn classifier(&self) -> Result<&FusionClassifier> {
        self.classifier.as_ref().ok_or(FusionError::Incomplete("trained MLP"))
    }

    pub fn decision_thresholds(&self) -> Result<&DecisionThresholds> {
        self.thresholds.as_ref().ok_or(FusionError::Incomplete("decision thresholds"))
    }

    pub fn extractor<'a>(&self, density: Option<&'a ClassDensityModel>) -> Result<FeatureExtractor<'a>> {
        Ok(FeatureExtractor::new(*self.config()?, self.temperatures, density)?)
    }
}

impl ModelFormat for FusionModel {
    const FORMAT: &'static str = "openset.fusion";
    const VERSION: u32 = 1;

    fn check(&self) -> std::result::Result<(), String> {
        if self.num_classes == 0 {
            return Err("num_classes must be positive".into());
        }
        if !(self.prune_threshold >= 0.0 && self.prune_threshold <= 1.0) {
            return Err("prune_threshold must be in [0, 1]".into());
        }
        for t in std::iter::once(&self.temperatures.detector).chain(&self.temperatures.gmm) {
            if !(t.value > 0.0 && t.value.is_finite()) {
                return Err(format!("temperature must be positive, got {}", t.value));
            }
        }
        if let Some(c) = &self.feature_config {
            c.validate().map_err(|e| e.to_string())?;
        }
        if let Some(clf) = &self.classifier {
            clf.parameters.check()?;
            if clf.parameters.num_classes() != clf.scheme.num_classes() {
                return Err("MLP output size does not match its class scheme".into());
            }
            let c = self.feature_config.as_ref().ok_or("classifier present without a feature configuration")?;
            if c.len(self.num_classes) != clf.parameters.input_len() {
                return Err(format!(
                    "feature length {} does not match MLP input {}",
                    c.len(self.num_classes),
                    clf.parameters.input_len()
                ));
            }
        }
        if let Some(t) = &self.thresholds {
            if !(0.0..=1.0).contains(&t.tau_ood) {
                return Err(format!("tau_ood must be in [0, 1], got {}", t.tau_ood));
            }
            if let Some(clf) = &self.classifier {
                if RuleKind::for_classes(clf.scheme.num_classes()).ok() != Some(t.rule) {
                    return Err("threshold rule does not match the class count".into());
                }
            }
        }
        Ok(())
    }
}

/// Complete model bound to its density model, ready to classify records.
#[derive(Debug, Clone, Copy)]
pub struct Classifier<'a> {
    extractor: FeatureExtractor<'a>,
    classifier: &'a FusionClassifier,
    thresholds: &'a DecisionThresholds,
    prune_threshold: f64,
}

impl<'a> Classifier<'a> {
    pub fn new(model: &'a FusionModel, density: Option<&'a ClassDensityModel>) -> Result<Self> {
        Ok(Classifier {
            extractor: model.extractor(density)?,
            classifier: model.classifier()?,
            thresholds: model.decision_thresholds()?,
            prune_threshold: model.prune_threshold,
        })
    }

    /// Posterior, or `None` when the record is pruned.
    pub fn posterior(&self, record: &DetectionRecord) -> Result<Option<Vec<f64>>> {
        if !is_retained(&record.class_logits, self.prune_threshold) {
            return Ok(None);
        }
        let f = self.extractor.assemble(record)?;
        Ok(Some(self.classifier.parameters.posterior(&f)?))
    }

    pub fn classify(&self, record: &DetectionRecord) -> Result<Decision> {
        Ok(match self.posterior(record)? {
            None => Decision::Suppressed,
            Some(p) => self.thresholds.decide(&p),
        })
    }
}

pub fn classify(model: &FusionModel, record: &DetectionRecord, density: Option<&ClassDensityModel>) -> Result<Decision> {
    Classifier::new(model, density)?.classify(record)
}
