//! Detection to ground-truth matching and four-way labeling.
//!
//! Per image, detections are assigned to ground-truth boxes by minimizing the
//! summed `1 - IoU` cost with the Hungarian method. Assigned pairs whose IoU
//! falls below the threshold are dropped. A detection that keeps its match is
//! `TP_ID` / `FP_ID` when the matched class is in the vocabulary (depending on
//! whether its argmax logit names that class) and `OOD` otherwise; detections
//! with no surviving match are `BG`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interchange::{BBox, ClassVocabulary, DetectionRecord, GroundTruthObject};
use crate::numeric::argmax;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("cost matrix has {found} entries, expected {rows}x{cols}")]
    CostShape {
        rows: usize,
        cols: usize,
        found: usize,
    },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("IoU threshold {0} must lie strictly between 0 and 1")]
    Threshold(f64),
    #[error("detection for image `{image_id}` has {found} logits, vocabulary has {expected}")]
    LogitLength {
        image_id: String,
        expected: usize,
        found: usize,
    },
}

/// Intersection over union of two well-formed boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, MatchError> {
    for bx in [a, b] {
        if !bx.is_well_formed() {
            return Err(MatchError::DegenerateBox(bx.to_array()));
        }
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatchError> {
        if data.len() != rows * cols {
            return Err(MatchError::CostShape {
                rows,
                cols,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatchError::NonFiniteCost {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchError> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            if r.len() != m {
                return Err(MatchError::CostShape {
                    rows: n,
                    cols: m,
                    found: n * r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        CostMatrix::new(n, m, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    /// Summed cost of `pairs`, accumulated in the given order.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

/// Minimum-cost one-to-one assignment of size `min(rows, cols)`.
///
/// Returns `(row, col)` pairs sorted by row. Shortest-augmenting-path
/// Hungarian method with potentials, `O(n^2 m)` for `n <= m`. Scans always
/// take the lowest index on ties, so the result is a deterministic function
/// of the matrix.
pub fn solve_assignment(cost: &CostMatrix) -> Vec<(usize, usize)> {
    if cost.rows == 0 || cost.cols == 0 {
        return Vec::new();
    }
    if cost.rows <= cost.cols {
        hungarian(cost.rows, cost.cols, |r, c| cost.get(r, c))
    } else {
        let mut pairs: Vec<(usize, usize)> = hungarian(cost.cols, cost.rows, |r, c| cost.get(c, r))
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        pairs
    }
}

fn hungarian(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    debug_assert!(n <= m);
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![f64::INFINITY; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatchLabel {
    #[serde(rename = "TP_ID")]
    TpId,
    #[serde(rename = "FP_ID")]
    FpId,
    #[serde(rename = "OOD")]
    Ood,
    #[serde(rename = "BG")]
    Bg,
}

impl MatchLabel {
    pub const ALL: [MatchLabel; 4] = [MatchLabel::TpId, MatchLabel::FpId, MatchLabel::Ood, MatchLabel::Bg];

    pub fn collapsed(self) -> Collapsed {
        match self {
            MatchLabel::TpId | MatchLabel::FpId => Collapsed::Id,
            MatchLabel::Ood => Collapsed::Ood,
            MatchLabel::Bg => Collapsed::Bg,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MatchLabel::TpId => "TP_ID",
            MatchLabel::FpId => "FP_ID",
            MatchLabel::Ood => "OOD",
            MatchLabel::Bg => "BG",
        }
    }
}

/// Three-way label used by the fusion classifier. The discriminant is the
/// output index of the MLP (ID = 0, OOD = 1, BG = 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Collapsed {
    #[serde(rename = "ID")]
    Id = 0,
    #[serde(rename = "OOD")]
    Ood = 1,
    #[serde(rename = "BG")]
    Bg = 2,
}

impl Collapsed {
    pub const ALL: [Collapsed; 3] = [Collapsed::Id, Collapsed::Ood, Collapsed::Bg];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Collapsed::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Collapsed::Id => "ID",
            Collapsed::Ood => "OOD",
            Collapsed::Bg => "BG",
        }
    }
}

/// A detection together with its matching outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDetection {
    #[serde(flatten)]
    pub record: DetectionRecord,
    pub label: MatchLabel,
    /// Zero-based index of the matched object in the ground-truth file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_gt: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
}

impl LabeledDetection {
    /// Class index of the matched ground truth when it is an ID class.
    pub fn true_class(&self, vocabulary: &ClassVocabulary) -> Option<usize> {
        self.matched_class.as_deref().and_then(|c| vocabulary.index_of(c))
    }

    pub fn consistent(&self) -> bool {
        let matched = self.matched_gt.is_some();
        (self.label == MatchLabel::Bg) != matched
            && self.matched_class.is_some() == matched
            && self.iou.is_some() == matched
    }
}

/// Labels every detection. Output order equals input order.
pub fn label_detections(
    detections: &[DetectionRecord],
    ground_truth: &[GroundTruthObject],
    vocabulary: &ClassVocabulary,
    iou_threshold: f64,
) -> Result<Vec<LabeledDetection>, MatchError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(MatchError::Threshold(iou_threshold));
    }
    for d in detections {
        if !d.bbox.is_well_formed() {
            return Err(MatchError::DegenerateBox(d.bbox.to_array()));
        }
        if d.class_logits.len() != vocabulary.len() {
            return Err(MatchError::LogitLength {
                image_id: d.image_id.clone(),
                expected: vocabulary.len(),
                found: d.class_logits.len(),
            });
        }
    }
    for g in ground_truth {
        if !g.bbox.is_well_formed() {
            return Err(MatchError::DegenerateBox(g.bbox.to_array()));
        }
    }

    let mut by_image: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in detections.iter().enumerate() {
        by_image.entry(&d.image_id).or_default().0.push(i);
    }
    for (i, g) in ground_truth.iter().enumerate() {
        by_image.entry(&g.image_id).or_default().1.push(i);
    }

    let mut matches: Vec<Option<(usize, f64)>> = vec![None; detections.len()];
    for (dets, gts) in by_image.values() {
        if dets.is_empty() || gts.is_empty() {
            continue;
        }
        let ious: Vec<f64> = dets
            .iter()
            .flat_map(|&d| {
                gts.iter()
                    .map(move |&g| iou_unchecked(&detections[d].bbox, &ground_truth[g].bbox))
            })
            .collect();
        let cost = CostMatrix {
            rows: dets.len(),
            cols: gts.len(),
            data: ious.iter().map(|v| 1.0 - v).collect(),
        };
        for (r, c) in solve_assignment(&cost) {
            let overlap = ious[r * gts.len() + c];
            if overlap >= iou_threshold {
                matches[dets[r]] = Some((gts[c], overlap));
            }
        }
    }

    Ok(detections
        .iter()
        .zip(matches)
        .map(|(d, m)| match m {
            None => LabeledDetection {
                record: d.clone(),
                label: MatchLabel::Bg,
                matched_gt: None,
                matched_class: None,
                iou: None,
            },
            Some((g, overlap)) => {
                let class_name = &ground_truth[g].class_name;
                let label = match vocabulary.index_of(class_name) {
                    None => MatchLabel::Ood,
                    Some(c) if argmax(&d.class_logits) == c => MatchLabel::TpId,
                    Some(_) => MatchLabel::FpId,
                };
                LabeledDetection {
                    record: d.clone(),
                    label,
                    matched_gt: Some(g),
                    matched_class: Some(class_name.clone()),
                    iou: Some(overlap),
                }
            }
        })
        .collect())
}

/// Counts per label, in [`MatchLabel::ALL`] order.
pub fn label_counts(labeled: &[LabeledDetection]) -> BTreeMap<MatchLabel, usize> {
    let mut counts: BTreeMap<MatchLabel, usize> = MatchLabel::ALL.iter().map(|l| (*l, 0)).collect();
    for d in labeled {
        *counts.entry(d.label).or_default() += 1;
    }
    counts
}
