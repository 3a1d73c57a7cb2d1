//! Synthetic detector outputs with known labels.
//!
//! Every object occupies its own cell of a per-image grid. Ground-truth boxes
//! sit inside the cell with a margin and matched detections are jittered
//! copies (IoU at least 0.9); background detections get a cell of their own,
//! so they overlap nothing. Embeddings and logits are drawn per label from
//! the configured populations.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interchange::{BBox, ClassVocabulary, DatasetBundle, DetectionRecord, GroundTruthObject, SplitTag};
use crate::matching::MatchLabel;
use crate::rng::{substream, StageRng};

const CELL: f64 = 100.0;
const MARGIN: f64 = 10.0;
/// Largest per-coordinate displacement of a matched detection.
const JITTER: f64 = 0.8;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{needed} cells needed but the canvas holds {available} ({images} images of {side}x{side})")]
    Geometry {
        needed: usize,
        available: usize,
        images: usize,
        side: usize,
    },
    #[error("invalid synthetic configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub mean: Vec<f64>,
    /// Isotropic standard deviation.
    pub std: f64,
}

/// Where BG embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BgEmbedding {
    /// Around a uniformly chosen ID class mean.
    NearId { std: f64 },
    Cluster(Cluster),
}

/// Mean of the top logit for a population; the other logits are centered
/// `separation` lower. All logits get Gaussian noise of `noise`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitModel {
    pub top_mean: f64,
    pub separation: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCounts {
    pub tp_id: usize,
    pub fp_id: usize,
    pub ood: usize,
    pub bg: usize,
    /// ID ground-truth objects without any detection.
    #[serde(default)]
    pub missed: usize,
}

impl LabelCounts {
    pub fn cells(&self) -> usize {
        self.tp_id + self.fp_id + self.ood + self.bg + self.missed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub split_tag: SplitTag,
    pub id_classes: Vec<String>,
    pub id_clusters: Vec<Cluster>,
    pub ood_classes: Vec<String>,
    pub ood_cluster: Cluster,
    pub bg_embedding: BgEmbedding,
    pub id_logits: LogitModel,
    pub ood_logits: LogitModel,
    pub bg_logits: LogitModel,
    pub counts: LabelCounts,
    pub images: usize,
    /// Grid side length per image, in cells.
    pub grid_side: usize,
    /// Prefix of generated image ids.
    pub image_prefix: String,
}

/// Which part of the bundled benchmark to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkPart {
    Train,
    Calibration,
    Test,
}

impl BenchmarkPart {
    pub const ALL: [BenchmarkPart; 3] = [BenchmarkPart::Train, BenchmarkPart::Calibration, BenchmarkPart::Test];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkPart::Train => "train",
            BenchmarkPart::Calibration => "calibration",
            BenchmarkPart::Test => "test",
        }
    }
}

impl SynthConfig {
    pub fn dim(&self) -> usize {
        self.ood_cluster.mean.len()
    }

    /// Benchmark in which the detector score separates BG from objects while
    /// the embedding separates OOD from ID: OOD objects get ID-like logits
    /// and embeddings far from the ID classes, BG gets low logits and
    /// embeddings inside the ID classes.
    pub fn benchmark(part: BenchmarkPart, seed: u64) -> Self {
        let dim = 8;
        let id_classes: Vec<String> = ["airplane", "helicopter", "bird", "drone"].map(String::from).to_vec();
        let id_clusters = (0..id_classes.len())
            .map(|c| {
                let mut mean = vec![0.0; dim];
                mean[c] = 4.0;
                Cluster { mean, std: 1.0 }
            })
            .collect();
        let mut ood_mean = vec![0.0; dim];
        ood_mean[4] = 2.5;
        ood_mean[5] = 2.5;
        let counts = match part {
            BenchmarkPart::Train => LabelCounts {
                tp_id: 2400,
                fp_id: 240,
                ood: 0,
                bg: 2000,
                missed: 120,
            },
            BenchmarkPart::Calibration => LabelCounts {
                tp_id: 800,
                fp_id: 80,
                ood: 0,
                bg: 400,
                missed: 40,
            },
            BenchmarkPart::Test => LabelCounts {
                tp_id: 1600,
                fp_id: 160,
                ood: 1200,
                bg: 1600,
                missed: 80,
            },
        };
        SynthConfig {
            seed: crate::rng::substream_seed(seed, part.name()),
            split_tag: match part {
                BenchmarkPart::Train => SplitTag::DetectorTrain,
                BenchmarkPart::Calibration => SplitTag::Calibration,
                BenchmarkPart::Test => SplitTag::OodTest,
            },
            id_classes,
            id_clusters,
            ood_classes: vec!["balloon".into(), "kite".into()],
            ood_cluster: Cluster { mean: ood_mean, std: 1.2 },
            bg_embedding: BgEmbedding::NearId { std: 1.3 },
            id_logits: LogitModel {
                top_mean: 2.0,
                separation: 3.0,
                noise: 1.0,
            },
            ood_logits: LogitModel {
                top_mean: 1.5,
                separation: 2.5,
                noise: 1.0,
            },
            bg_logits: LogitModel {
                top_mean: -0.5,
                separation: 1.5,
                noise: 1.0,
            },
            counts,
            images: 400,
            grid_side: 5,
            image_prefix: format!("{}-", part.name()),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        let dim = self.dim();
        if dim == 0 {
            return bad("embedding dimension must be positive".into());
        }
        if self.id_classes.is_empty() || self.id_classes.len() != self.id_clusters.len() {
            return bad("need one cluster per ID class and at least one ID class".into());
        }
        if self.counts.fp_id > 0 && self.id_classes.len() < 2 {
            return bad("FP-ID detections need at least two ID classes".into());
        }
        if self.counts.ood > 0 && self.ood_classes.is_empty() {
            return bad("OOD detections need at least one OOD class".into());
        }
        if let Some(c) = self.ood_classes.iter().find(|c| self.id_classes.contains(c)) {
            return bad(format!("class `{c}` is both ID and OOD"));
        }
        let mut clusters: Vec<&Cluster> = self.id_clusters.iter().collect();
        clusters.push(&self.ood_cluster);
        if let BgEmbedding::Cluster(c) = &self.bg_embedding {
            clusters.push(c);
        }
        for c in clusters {
            if c.mean.len() != dim {
                return bad("cluster means must share one dimension".into());
            }
            if !(c.std > 0.0 && c.std.is_finite()) {
                return bad("cluster std must be positive".into());
            }
        }
        if let BgEmbedding::NearId { std } = self.bg_embedding {
            if !(std > 0.0 && std.is_finite()) {
                return bad("BG std must be positive".into());
            }
        }
        for l in [self.id_logits, self.ood_logits, self.bg_logits] {
            if !(l.noise > 0.0 && l.noise.is_finite()) {
                return bad("logit noise must be positive".into());
            }
            if !l.top_mean.is_finite() || !l.separation.is_finite() {
                return bad("logit parameters must be finite".into());
            }
        }
        let needed = self.counts.cells();
        let available = self.images * self.grid_side * self.grid_side;
        if needed > available {
            return Err(SynthError::Geometry {
                needed,
                available,
                images: self.images,
                side: self.grid_side,
            });
        }
        Ok(())
    }
}

/// Generated bundle with the label each detection was constructed to get.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub bundle: DatasetBundle,
    pub intended: Vec<MatchLabel>,
}

fn sample_cluster(rng: &mut StageRng, c: &Cluster) -> Vec<f64> {
    c.mean
        .iter()
        .map(|m| m + c.std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Logits whose argmax is `top`; `top` gets the population's top mean.
fn sample_logits(rng: &mut StageRng, model: &LogitModel, classes: usize, top: usize) -> Vec<f64> {
    let noise = Normal::new(0.0, model.noise).expect("validated noise");
    let mut l: Vec<f64> = (0..classes)
        .map(|c| {
            let centre = if c == top { model.top_mean } else { model.top_mean - model.separation };
            centre + noise.sample(rng)
        })
        .collect();
    let max_at = crate::numeric::argmax(&l);
    l.swap(top, max_at);
    if classes > 1 && l.iter().enumerate().any(|(c, v)| c != top && *v == l[top]) {
        l[top] += 1e-6;
    }
    l
}

fn jitter(rng: &mut StageRng, b: &BBox) -> BBox {
    let mut j = || rng.random_range(-JITTER..=JITTER);
    BBox::new(b.x_min + j(), b.y_min + j(), b.x_max + j(), b.y_max + j())
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthOutput, SynthError> {
    config.validate()?;
    let vocabulary = ClassVocabulary::new(config.id_classes.clone()).map_err(|e| SynthError::Config(e.to_string()))?;
    let c = config.id_classes.len();
    let mut layout_rng = substream(config.seed, "synth-layout");
    let mut emb_rng = substream(config.seed, "synth-embedding");
    let mut logit_rng = substream(config.seed, "synth-logits");

    #[derive(Clone, Copy)]
    enum Slot {
        Det(MatchLabel),
        Missed,
    }
    let mut slots = Vec::with_capacity(config.counts.cells());
    let k = &config.counts;
    for (label, n) in [
        (Slot::Det(MatchLabel::TpId), k.tp_id),
        (Slot::Det(MatchLabel::FpId), k.fp_id),
        (Slot::Det(MatchLabel::Ood), k.ood),
        (Slot::Det(MatchLabel::Bg), k.bg),
        (Slot::Missed, k.missed),
    ] {
        slots.extend(std::iter::repeat_n(label, n));
    }
    // Random cells across the whole canvas.
    let side = config.grid_side;
    let per_image = side * side;
    let mut cells: Vec<usize> = (0..config.images * per_image).collect();
    cells.shuffle(&mut layout_rng);
    let mut placed: Vec<(usize, Slot)> = cells.into_iter().zip(slots).collect();
    placed.sort_by_key(|(cell, _)| *cell);

    let images: Vec<String> = (0..config.images)
        .map(|i| format!("{}{i:05}", config.image_prefix))
        .collect();
    let mut detections = Vec::new();
    let mut ground_truth = Vec::new();
    let mut intended = Vec::new();
    for (cell, slot) in placed {
        let image_id = images[cell / per_image].clone();
        let local = cell % per_image;
        let (x0, y0) = ((local % side) as f64 * CELL, (local / side) as f64 * CELL);
        let w = layout_rng.random_range(0.0..MARGIN);
        let h = layout_rng.random_range(0.0..MARGIN);
        let gt_box = BBox::new(x0 + MARGIN, y0 + MARGIN, x0 + CELL - MARGIN - w, y0 + CELL - MARGIN - h);
        let label = match slot {
            Slot::Missed => {
                let class = layout_rng.random_range(0..c);
                ground_truth.push(GroundTruthObject {
                    image_id,
                    bbox: gt_box,
                    class_name: config.id_classes[class].clone(),
                });
                continue;
            }
            Slot::Det(l) => l,
        };
        let (class_name, embedding, logits) = match label {
            MatchLabel::TpId | MatchLabel::FpId => {
                let class = layout_rng.random_range(0..c);
                let top = if label == MatchLabel::TpId {
                    class
                } else {
                    (class + layout_rng.random_range(1..c)) % c
                };
                let e = sample_cluster(&mut emb_rng, &config.id_clusters[class]);
                let l = sample_logits(&mut logit_rng, &config.id_logits, c, top);
                (Some(config.id_classes[class].clone()), e, l)
            }
            MatchLabel::Ood => {
                let name = config.ood_classes.choose(&mut layout_rng).expect("validated").clone();
                let e = sample_cluster(&mut emb_rng, &config.ood_cluster);
                let top = logit_rng.random_range(0..c);
                let l = sample_logits(&mut logit_rng, &config.ood_logits, c, top);
                (Some(name), e, l)
            }
            MatchLabel::Bg => {
                let e = match &config.bg_embedding {
                    BgEmbedding::NearId { std } => {
                        let class = emb_rng.random_range(0..c);
                        let cl = Cluster {
                            mean: config.id_clusters[class].mean.clone(),
                            std: *std,
                        };
                        sample_cluster(&mut emb_rng, &cl)
                    }
                    BgEmbedding::Cluster(cl) => sample_cluster(&mut emb_rng, cl),
                };
                let top = logit_rng.random_range(0..c);
                let l = sample_logits(&mut logit_rng, &config.bg_logits, c, top);
                (None, e, l)
            }
        };
        let bbox = match &class_name {
            Some(name) => {
                ground_truth.push(GroundTruthObject {
                    image_id: image_id.clone(),
                    bbox: gt_box,
                    class_name: name.clone(),
                });
                jitter(&mut layout_rng, &gt_box)
            }
            None => gt_box,
        };
        detections.push(DetectionRecord {
            image_id,
            bbox,
            class_logits: logits,
            embedding,
            detector_score: None,
        });
        intended.push(label);
    }
    let bundle = DatasetBundle {
        images,
        detections,
        ground_truth,
        vocabulary,
        split_tag: config.split_tag,
    };
    bundle.validate().map_err(|e| SynthError::Config(e.to_string()))?;
    Ok(SynthOutput { bundle, intended })
}

/// `n` draws each from `Normal(mu_pos, sigma)` and `Normal(mu_neg, sigma)`.
pub fn two_normal_scores(mu_pos: f64, mu_neg: f64, sigma: f64, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = substream(seed, "two-normal");
    let pos = Normal::new(mu_pos, sigma).expect("positive sigma");
    let neg = Normal::new(mu_neg, sigma).expect("positive sigma");
    let p = (0..n).map(|_| pos.sample(&mut rng)).collect();
    let q = (0..n).map(|_| neg.sample(&mut rng)).collect();
    (p, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{iou, label_counts, label_detections, DEFAULT_IOU_THRESHOLD};

    fn small(seed: u64) -> SynthConfig {
        let mut c = SynthConfig::benchmark(BenchmarkPart::Test, seed);
        c.counts = LabelCounts {
            tp_id: 40,
            fp_id: 10,
            ood: 20,
            bg: 30,
            missed: 5,
        };
        c.images = 8;
        c
    }

    #[test]
    fn labels_reproduce_under_matching() {
        let out = generate_synthetic(&small(4)).unwrap();
        let b = &out.bundle;
        let labeled = label_detections(&b.detections, &b.ground_truth, &b.vocabulary, DEFAULT_IOU_THRESHOLD).unwrap();
        let got: Vec<MatchLabel> = labeled.iter().map(|d| d.label).collect();
        assert_eq!(got, out.intended);
        let counts = label_counts(&labeled);
        assert_eq!(counts[&MatchLabel::TpId], 40);
        assert_eq!(counts[&MatchLabel::Bg], 30);
        for d in &labeled {
            if let Some(v) = d.iou {
                assert!(v >= 0.9, "{v}");
            }
        }
    }

    #[test]
    fn background_boxes_overlap_nothing() {
        let out = generate_synthetic(&small(5)).unwrap();
        for (d, l) in out.bundle.detections.iter().zip(&out.intended) {
            if *l == MatchLabel::Bg {
                for g in &out.bundle.ground_truth {
                    if g.image_id == d.image_id {
                        assert_eq!(iou(&d.bbox, &g.bbox).unwrap(), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_synthetic(&small(1)).unwrap();
        assert_eq!(a, generate_synthetic(&small(1)).unwrap());
        assert_ne!(a, generate_synthetic(&small(2)).unwrap());
    }

    #[test]
    fn no_ood_is_valid() {
        let mut c = small(3);
        c.counts.ood = 0;
        let out = generate_synthetic(&c).unwrap();
        assert!(!out.intended.contains(&MatchLabel::Ood));
    }

    #[test]
    fn geometry_overflow_is_reported() {
        let mut c = small(3);
        c.images = 1;
        assert!(matches!(generate_synthetic(&c), Err(SynthError::Geometry { .. })));
    }
}
