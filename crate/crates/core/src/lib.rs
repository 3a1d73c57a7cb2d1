//! Post-hoc open-set detection.
//!
//! The crate consumes per-detection outputs of an arbitrary object detector
//! (boxes, class logits, embeddings), labels them against ground truth, fits
//! class-conditional Gaussian densities on embeddings, calibrates logits with
//! scalar temperatures, and trains a small fusion MLP that sorts every
//! detection into in-distribution (ID), out-of-distribution (OOD) or
//! background (BG). The `metrics` module implements the evaluation protocol
//! (AUROC variants, TPR at fixed open-set rates, closed/open-set mAP and
//! throughput) and `pipeline` chains the stages with reproducible artifacts.
//!
//! Stage order used by [`pipeline::run_pipeline`]:
//!
//! ```text
//! match -> fit-gmm -> calibrate -> build-features -> split
//!       -> train-mlp -> tune-thresholds -> evaluate
//! ```

pub mod calibration;
pub mod density;
pub mod error;
pub mod features;
pub mod fusion;
pub mod interchange;
pub mod matching;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
