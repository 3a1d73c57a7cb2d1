//! Evaluation: AUROC variants, TPR at fixed open-set rates, detection AP and
//! throughput.
//!
//! AUROC is the Mann-Whitney statistic with ties counted as half a pair. It
//! is accumulated as an exact integer count of doubled pair credits, so the
//! result does not depend on summation order.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interchange::{BBox, ClassVocabulary, GroundTruthObject};
use crate::matching::{iou_unchecked, Collapsed};

pub const DEFAULT_OSR_LEVELS: [f64; 3] = [0.05, 0.10, 0.20];
pub const MIN_THROUGHPUT_RECORDS: usize = 1000;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{0} score set is empty")]
    EmptyClass(&'static str),
    #[error("non-finite score")]
    NonFinite,
    #[error("{posteriors} posteriors but {labels} labels")]
    LengthMismatch { posteriors: usize, labels: usize },
    #[error("posterior has {found} entries, expected 3")]
    PosteriorLength { found: usize },
    #[error("OSR level {0} outside [0, 1]")]
    Level(f64),
    #[error("IoU threshold {0} outside (0, 1]")]
    IouThreshold(f64),
    #[error("detection {index}: class index {class} out of range")]
    ClassIndex { index: usize, class: usize },
    #[error("empty record stream")]
    EmptyStream,
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

fn check_scores(scores: &[f64], which: &'static str) -> Result<()> {
    if scores.is_empty() {
        return Err(MetricError::EmptyClass(which));
    }
    if scores.iter().any(|s| s.is_nan() || s.is_infinite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Doubled Mann-Whitney count: `2 * #(pos > neg) + #(pos == neg)`.
fn doubled_u(positives: &[f64], negatives: &[f64]) -> u128 {
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut neg_below: u128 = 0;
    let mut u2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        // -0.0 and 0.0 compare equal and must share a tie group.
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        u2 += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    u2
}

/// Probability that a random positive outscores a random negative.
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    check_scores(positives, "positive")?;
    check_scores(negatives, "negative")?;
    let u2 = doubled_u(positives, negatives);
    Ok(u2 as f64 / (2.0 * positives.len() as f64 * negatives.len() as f64))
}

/// AUROC with OOD and BG merged into the negative class.
pub fn auroc_bd(id: &[f64], ood: &[f64], bg: &[f64]) -> Result<f64> {
    let negatives: Vec<f64> = ood.iter().chain(bg).copied().collect();
    check_scores(id, "ID")?;
    if negatives.is_empty() {
        return Err(MetricError::EmptyClass("OOD/BG"));
    }
    auroc(id, &negatives)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub area: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            s.push_str(&format!("{f},{t}\n"));
        }
        s
    }
}

/// ROC points at every distinct threshold, highest first; the area is the
/// trapezoidal integral of the points.
pub fn roc_curve(positives: &[f64], negatives: &[f64]) -> Result<RocCurve> {
    check_scores(positives, "positive")?;
    check_scores(negatives, "negative")?;
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let (px, py) = *points.last().unwrap();
        let p = (fp as f64 / nn, tp as f64 / np);
        area += (p.0 - px) * (p.1 + py) / 2.0;
        points.push(p);
        i = j;
    }
    Ok(RocCurve { points, area })
}

/// Per-pair AUROCs among ID, OOD and BG and their unweighted mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseAuroc {
    pub id_ood: f64,
    pub id_bg: f64,
    pub ood_bg: f64,
    pub macro_auroc: f64,
}

impl PairwiseAuroc {
    pub fn from_pairs(id_ood: f64, id_bg: f64, ood_bg: f64) -> Self {
        PairwiseAuroc {
            id_ood,
            id_bg,
            ood_bg,
            macro_auroc: (id_ood + id_bg + ood_bg) / 3.0,
        }
    }
}

fn split_by_label<T: Copy>(values: &[T], labels: &[Collapsed]) -> [Vec<T>; 3] {
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (v, l) in values.iter().zip(labels) {
        out[l.index()].push(*v);
    }
    out
}

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// For each pair `(a, b)`, the samples labeled `a` or `b` are scored by
/// `posterior[a] - posterior[b]` with `a` as the positive class.
pub fn macro_pairwise_auroc(posteriors: &[Vec<f64>], labels: &[Collapsed]) -> Result<PairwiseAuroc> {
    if posteriors.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            posteriors: posteriors.len(),
            labels: labels.len(),
        });
    }
    if let Some(p) = posteriors.iter().find(|p| p.len() != 3) {
        return Err(MetricError::PosteriorLength { found: p.len() });
    }
    for c in Collapsed::ALL {
        if !labels.contains(&c) {
            return Err(MetricError::EmptyClass(c.as_str()));
        }
    }
    let mut values = [0.0; 3];
    for (slot, (a, b)) in values.iter_mut().zip(PAIRS) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (p, l) in posteriors.iter().zip(labels) {
            let s = p[a] - p[b];
            if l.index() == a {
                pos.push(s);
            } else if l.index() == b {
                neg.push(s);
            }
        }
        *slot = auroc(&pos, &neg)?;
    }
    Ok(PairwiseAuroc::from_pairs(values[0], values[1], values[2]))
}

/// Three-class separability of one scalar score. The score carries no class
/// order of its own, so each of the six orderings of (ID, OOD, BG) along the
/// score axis is tried and the best macro value is kept.
pub fn scalar_pairwise_auroc(scores: &[f64], labels: &[Collapsed]) -> Result<PairwiseAuroc> {
    let groups = split_by_label(scores, labels);
    for (g, name) in groups.iter().zip(["ID", "OOD", "BG"]) {
        if g.is_empty() {
            return Err(MetricError::EmptyClass(name));
        }
    }
    // Pair AUROCs with the first class of each pair scoring higher.
    let up: Vec<f64> = PAIRS
        .iter()
        .map(|&(a, b)| auroc(&groups[a], &groups[b]))
        .collect::<Result<_>>()?;
    let orders: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut best: Option<PairwiseAuroc> = None;
    for order in orders {
        // rank[c] = position of class c from the top.
        let mut rank = [0; 3];
        for (pos, &c) in order.iter().enumerate() {
            rank[c] = pos;
        }
        let v: Vec<f64> = PAIRS
            .iter()
            .zip(&up)
            .map(|(&(a, b), &u)| if rank[a] < rank[b] { Ok(u) } else { auroc(&groups[b], &groups[a]) })
            .collect::<Result<_>>()?;
        let cand = PairwiseAuroc::from_pairs(v[0], v[1], v[2]);
        if best.is_none_or(|b| cand.macro_auroc > b.macro_auroc) {
            best = Some(cand);
        }
    }
    Ok(best.expect("six orderings"))
}

/// ID recall at fixed open-set rates. At level `r` at most `floor(r * n_ood)`
/// OOD scores may be accepted; the threshold sits just above the next OOD
/// score and an ID score is accepted when strictly above it.
pub fn tpr_at_osr(id: &[f64], ood: &[f64], levels: &[f64]) -> Result<BTreeMap<String, f64>> {
    check_scores(id, "ID")?;
    check_scores(ood, "OOD")?;
    let mut ood_desc = ood.to_vec();
    ood_desc.sort_by(|a, b| b.total_cmp(a));
    let mut out = BTreeMap::new();
    for &level in levels {
        if !(0.0..=1.0).contains(&level) {
            return Err(MetricError::Level(level));
        }
        let allowed = (level * ood.len() as f64 + 1e-9).floor() as usize;
        let tpr = if allowed >= ood.len() {
            1.0
        } else {
            // Ties with the first rejected OOD score are rejected with it.
            let cut = ood_desc[allowed];
            id.iter().filter(|&&s| s > cut).count() as f64 / id.len() as f64
        };
        out.insert(format!("{level:.2}"), tpr);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// One detection entering AP: predicted class and its confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDetection {
    pub image_id: String,
    pub bbox: BBox,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// Per ID class with at least one ground-truth object.
    pub per_class: BTreeMap<String, f64>,
    pub mean_ap: f64,
}

/// Precision/recall ranking outcome for one class: hit flags in rank order.
pub fn match_class_detections(
    detections: &[&ScoredDetection],
    ground_truth: &[&GroundTruthObject],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].confidence.total_cmp(&detections[a].confidence));
    let mut used = vec![false; ground_truth.len()];
    order
        .iter()
        .map(|&di| {
            let d = detections[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in ground_truth.iter().enumerate() {
                if used[gi] || g.image_id != d.image_id {
                    continue;
                }
                let iou = iou_unchecked(&d.bbox, &g.bbox);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, _)) => {
                    used[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the interpolated precision-recall curve of a ranked hit list.
pub fn ap_from_hits(hits: &[bool], n_gt: usize, interpolation: Interpolation) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Envelope: best precision at this rank or any later one.
    let mut envelope = precision.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    match interpolation {
        Interpolation::AllPoint => {
            let sum: f64 = hits.iter().zip(&envelope).filter(|(h, _)| **h).map(|(_, p)| *p).sum();
            sum / n_gt as f64
        }
        Interpolation::ElevenPoint => {
            let mut total = 0.0;
            for t in 0..=10 {
                let r = t as f64 / 10.0;
                let p = recall
                    .iter()
                    .zip(&precision)
                    .filter(|(rc, _)| **rc >= r - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                total += p;
            }
            total / 11.0
        }
    }
}

/// Per-class AP over ID classes. Ground truth whose class is not in the
/// vocabulary is left out of every pool; detections matching it count as
/// false positives of their predicted class.
pub fn average_precision(
    detections: &[ScoredDetection],
    ground_truth: &[GroundTruthObject],
    vocabulary: &ClassVocabulary,
    iou_threshold: f64,
    interpolation: Interpolation,
) -> Result<ApResult> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(MetricError::IouThreshold(iou_threshold));
    }
    for (index, d) in detections.iter().enumerate() {
        if d.class >= vocabulary.len() {
            return Err(MetricError::ClassIndex { index, class: d.class });
        }
        if !d.confidence.is_finite() {
            return Err(MetricError::NonFinite);
        }
    }
    let mut per_class = BTreeMap::new();
    for c in 0..vocabulary.len() {
        let name = vocabulary.name(c);
        let gts: Vec<&GroundTruthObject> = ground_truth.iter().filter(|g| g.class_name == name).collect();
        if gts.is_empty() {
            continue;
        }
        let dets: Vec<&ScoredDetection> = detections.iter().filter(|d| d.class == c).collect();
        let hits = match_class_detections(&dets, &gts, iou_threshold);
        per_class.insert(name.to_string(), ap_from_hits(&hits, gts.len(), interpolation));
    }
    let mean_ap = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(ApResult { per_class, mean_ap })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    /// Detections per second, mean over runs.
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    pub records_per_run: usize,
}

/// Times `classify` over `records`, repeated so each run covers at least
/// [`MIN_THROUGHPUT_RECORDS`] records, after one warm-up pass.
pub fn measure_throughput<T, F>(records: &[T], runs: usize, mut classify: F) -> Result<Throughput>
where
    F: FnMut(&T),
{
    if records.is_empty() {
        return Err(MetricError::EmptyStream);
    }
    let runs = runs.max(1);
    let repeats = MIN_THROUGHPUT_RECORDS.div_ceil(records.len());
    let per_run = repeats * records.len();
    records.iter().for_each(&mut classify);
    let mut rates = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        for _ in 0..repeats {
            records.iter().for_each(&mut classify);
        }
        let secs = start.elapsed().as_secs_f64().max(1e-12);
        rates.push(per_run as f64 / secs);
    }
    let mean = rates.iter().sum::<f64>() / runs as f64;
    let var = rates.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / runs as f64;
    Ok(Throughput {
        mean,
        std: var.sqrt(),
        runs,
        records_per_run: per_run,
    })
}

/// Single-feature comparison row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub feature: String,
    pub auroc: f64,
    pub auroc_bd: f64,
    pub pairwise: Option<PairwiseAuroc>,
}

/// Two-class AUROC variants for one ID-side score.
pub fn two_class_aurocs(scores: &[f64], labels: &[Collapsed]) -> Result<(f64, f64)> {
    let [id, ood, bg] = split_by_label(scores, labels);
    Ok((auroc(&id, &ood)?, auroc_bd(&id, &ood, &bg)?))
}

/// Baseline row for a scalar feature where larger means more ID-like when
/// `higher_is_id`, otherwise the sign is flipped.
pub fn baseline_row(feature: &str, scores: &[f64], labels: &[Collapsed], higher_is_id: bool) -> Result<BaselineRow> {
    let oriented: Vec<f64> = if higher_is_id {
        scores.to_vec()
    } else {
        scores.iter().map(|v| -v).collect()
    };
    let (a, bd) = two_class_aurocs(&oriented, labels)?;
    let has_bg = labels.contains(&Collapsed::Bg);
    Ok(BaselineRow {
        feature: feature.to_string(),
        auroc: a,
        auroc_bd: bd,
        pairwise: if has_bg { Some(scalar_pairwise_auroc(scores, labels)?) } else { None },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Number of evaluated (retained) detections.
    pub detections: usize,
    pub counts: BTreeMap<String, usize>,
    pub pruned: usize,
    pub auroc: f64,
    pub auroc_bd: f64,
    pub pairwise: Option<PairwiseAuroc>,
    pub tpr_at_osr: BTreeMap<String, f64>,
    pub closed_set_map: f64,
    pub open_set_map: f64,
    pub fps: Option<Throughput>,
    /// Decisions per true collapsed label: `confusion[true][decision]`.
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
    pub baselines: Vec<BaselineRow>,
    /// ROC curves keyed by name (`fusion`, `fusion-bd`).
    #[serde(default)]
    pub roc_curves: BTreeMap<String, RocCurve>,
    pub tau_ood: f64,
    pub escape_bound: f64,
    pub ood_escape: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in pos {
            for n in neg {
                s += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (pos.len() as f64 * neg.len() as f64)
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[0.3; 7]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4], &[0.5, 0.1]).unwrap(), 0.75);
        assert!(matches!(auroc(&[], &[1.0]), Err(MetricError::EmptyClass(_))));
        assert!(matches!(auroc(&[f64::NAN], &[1.0]), Err(MetricError::NonFinite)));
        assert_eq!(auroc(&[0.0], &[-0.0]).unwrap(), 0.5);
    }

    #[test]
    fn auroc_bd_examples() {
        let id = [0.9, 0.3, 0.7];
        let ood = [0.2, 0.8];
        assert_eq!(auroc_bd(&id, &ood, &[]).unwrap(), auroc(&id, &ood).unwrap());
        assert_eq!(auroc_bd(&[1.0], &[0.0], &[0.0]).unwrap(), 1.0);
        let bg = [0.5, 0.1, 0.7];
        let merged: Vec<f64> = ood.iter().chain(&bg).copied().collect();
        assert_eq!(auroc_bd(&id, &ood, &bg).unwrap(), pairwise(&id, &merged));
    }

    #[test]
    fn roc_curve_area_and_endpoints() {
        let pos = [0.9, 0.4, 0.4, 0.8];
        let neg = [0.5, 0.1, 0.4];
        let c = roc_curve(&pos, &neg).unwrap();
        assert_eq!(c.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(c.points.last(), Some(&(1.0, 1.0)));
        assert!(c.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
        assert!((c.area - auroc(&pos, &neg).unwrap()).abs() < 1e-12);
        assert!(c.to_csv().starts_with("fpr,tpr\n0,0\n"));
    }

    #[test]
    fn macro_examples() {
        let m = PairwiseAuroc::from_pairs(0.722, 0.957, 0.951);
        assert!((m.macro_auroc - 0.8767).abs() < 1e-4);
        let labels: Vec<Collapsed> = (0..9).map(|i| Collapsed::ALL[i % 3]).collect();
        let post = vec![vec![0.2, 0.3, 0.5]; 9];
        let m = macro_pairwise_auroc(&post, &labels).unwrap();
        assert_eq!((m.id_ood, m.id_bg, m.ood_bg, m.macro_auroc), (0.5, 0.5, 0.5, 0.5));
        assert!(matches!(
            macro_pairwise_auroc(&post[..2], &labels[..2]),
            Err(MetricError::EmptyClass("BG"))
        ));
    }

    #[test]
    fn scalar_pairwise_picks_best_order() {
        // BG < ID < OOD along the score.
        let scores = [1.0, 1.1, 5.0, 5.1, -3.0, -3.1];
        let labels = [Collapsed::Id, Collapsed::Id, Collapsed::Ood, Collapsed::Ood, Collapsed::Bg, Collapsed::Bg];
        let m = scalar_pairwise_auroc(&scores, &labels).unwrap();
        assert_eq!(m.macro_auroc, 1.0);
    }

    #[test]
    fn tpr_examples() {
        let id = [0.9, 0.8, 0.7, 0.6];
        let t = tpr_at_osr(&id, &[0.75, 0.1], &[0.2, 1.0]).unwrap();
        assert_eq!(t["0.20"], 0.5);
        assert_eq!(t["1.00"], 1.0);
        let t = tpr_at_osr(&id, &[0.1, 0.2], &DEFAULT_OSR_LEVELS).unwrap();
        assert!(t.values().all(|v| *v == 1.0));
        assert!(matches!(tpr_at_osr(&id, &[0.1], &[1.5]), Err(MetricError::Level(_))));
    }

    fn gt(image: &str, b: [f64; 4], class: &str) -> GroundTruthObject {
        GroundTruthObject {
            image_id: image.into(),
            bbox: b.into(),
            class_name: class.into(),
        }
    }

    fn det(image: &str, b: [f64; 4], class: usize, confidence: f64) -> ScoredDetection {
        ScoredDetection {
            image_id: image.into(),
            bbox: b.into(),
            class,
            confidence,
        }
    }

    #[test]
    fn ap_examples() {
        let vocab = ClassVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let gts = vec![gt("i", [0.0, 0.0, 10.0, 10.0], "a"), gt("i", [20.0, 0.0, 30.0, 10.0], "b")];
        let perfect = vec![det("i", [0.0, 0.0, 10.0, 10.0], 0, 0.9), det("i", [20.0, 0.0, 30.0, 10.0], 1, 0.8)];
        let r = average_precision(&perfect, &gts, &vocab, 0.5, Interpolation::AllPoint).unwrap();
        assert_eq!(r.mean_ap, 1.0);
        let r = average_precision(&[], &gts, &vocab, 0.5, Interpolation::AllPoint).unwrap();
        assert_eq!(r.mean_ap, 0.0);

        // hit, miss, hit against 2 GT: envelope (1, 2/3, 2/3) at TP ranks -> (1 + 2/3) / 2.
        let gts = vec![gt("i", [0.0, 0.0, 10.0, 10.0], "a"), gt("i", [20.0, 0.0, 30.0, 10.0], "a")];
        let dets = vec![
            det("i", [0.0, 0.0, 10.0, 10.0], 0, 0.9),
            det("i", [50.0, 50.0, 60.0, 60.0], 0, 0.8),
            det("i", [20.0, 0.0, 30.0, 10.0], 0, 0.7),
        ];
        let r = average_precision(&dets, &gts, &vocab, 0.5, Interpolation::AllPoint).unwrap();
        assert_eq!(r.per_class["a"], (1.0 + 2.0 / 3.0) / 2.0);
        assert!(!r.per_class.contains_key("b"));
        let r11 = average_precision(&dets, &gts, &vocab, 0.5, Interpolation::ElevenPoint).unwrap();
        assert!((r11.per_class["a"] - (6.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn ap_ignores_ood_ground_truth_and_duplicates() {
        let vocab = ClassVocabulary::new(vec!["a".into()]).unwrap();
        let gts = vec![gt("i", [0.0, 0.0, 10.0, 10.0], "a"), gt("i", [20.0, 0.0, 30.0, 10.0], "zebra")];
        let dets = vec![
            det("i", [0.0, 0.0, 10.0, 10.0], 0, 0.9),
            det("i", [0.0, 0.0, 10.0, 10.0], 0, 0.8),
            det("i", [20.0, 0.0, 30.0, 10.0], 0, 0.95),
        ];
        let r = average_precision(&dets, &gts, &vocab, 0.5, Interpolation::AllPoint).unwrap();
        assert_eq!(r.per_class["a"], 0.5);
    }

    #[test]
    fn throughput_counts_records() {
        let records = vec![1u64; 10];
        let mut calls = 0usize;
        let t = measure_throughput(&records, 3, |_| calls += 1).unwrap();
        assert_eq!(t.records_per_run, 1000);
        assert_eq!(calls, 10 + 3 * 1000);
        assert!(t.mean > 0.0);
        assert!(matches!(measure_throughput::<u64, _>(&[], 1, |_| {}), Err(MetricError::EmptyStream)));
    }

    proptest! {
        #[test]
        fn sort_matches_pairwise(pos in prop::collection::vec(0u8..6, 1..30), neg in prop::collection::vec(0u8..6, 1..30)) {
            let p: Vec<f64> = pos.iter().map(|&v| v as f64).collect();
            let n: Vec<f64> = neg.iter().map(|&v| v as f64).collect();
            prop_assert_eq!(auroc(&p, &n).unwrap(), pairwise(&p, &n));
        }

        #[test]
        fn complement_and_monotone_invariance(pos in prop::collection::vec(-5.0f64..5.0, 1..20), neg in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            let a = auroc(&pos, &neg).unwrap();
            let b = auroc(&neg, &pos).unwrap();
            let tie_free = pos.iter().all(|p| neg.iter().all(|n| p != n));
            if tie_free {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
            let f = |v: &f64| v.exp() * 3.0 + 1.0;
            let tp: Vec<f64> = pos.iter().map(f).collect();
            let tn: Vec<f64> = neg.iter().map(f).collect();
            prop_assert_eq!(auroc(&tp, &tn).unwrap(), a);
        }

        #[test]
        fn tpr_monotone_in_level(id in prop::collection::vec(0.0f64..1.0, 1..20), ood in prop::collection::vec(0.0f64..1.0, 1..20)) {
            let levels: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
            let t = tpr_at_osr(&id, &ood, &levels).unwrap();
            let v: Vec<f64> = levels.iter().map(|l| t[&format!("{l:.2}")]).collect();
            prop_assert!(v.windows(2).all(|w| w[1] >= w[0]));
        }
    }
}
