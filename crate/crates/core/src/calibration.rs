//! Scalar temperature scaling for detector logits and GMM logits.
//!
//! The temperature minimizes the mean softmax cross-entropy of
//! `logits / T` against the true class. The objective is convex in `1 / T`
//! and therefore unimodal in `ln T`, so a coarse grid bracket followed by a
//! golden-section refinement finds the global minimum on `[0.01, 100]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::log_sum_exp;

pub const MIN_TEMPERATURE: f64 = 0.01;
pub const MAX_TEMPERATURE: f64 = 100.0;
/// Search tolerance in `ln T`.
pub const LOG_T_TOLERANCE: f64 = 1e-4;
const GRID_POINTS: usize = 81;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("no calibration samples")]
    Empty,
    #[error("{logits} logit vectors but {labels} labels")]
    LengthMismatch { logits: usize, labels: usize },
    #[error("sample {index}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("sample {index}: non-finite logit")]
    NonFinite { index: usize },
    #[error("temperature must be positive and finite, got {0}")]
    NonPositive(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureTarget {
    DetectorLogits,
    GmmLogits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub value: f64,
    pub target: TemperatureTarget,
    /// Mean NLL on the calibration data at `value`; `None` when not fitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_nll: Option<f64>,
}

impl Temperature {
    pub fn identity(target: TemperatureTarget) -> Self {
        Temperature {
            value: 1.0,
            target,
            calibration_nll: None,
        }
    }

    pub fn apply(&self, logits: &[f64]) -> Vec<f64> {
        logits.iter().map(|v| v / self.value).collect()
    }
}

/// Detector and (optional) GMM temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub detector: Temperature,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gmm: Option<Temperature>,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures {
            detector: Temperature::identity(TemperatureTarget::DetectorLogits),
            gmm: None,
        }
    }
}

pub fn apply_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>, CalibrationError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(CalibrationError::NonPositive(temperature));
    }
    Ok(logits.iter().map(|v| v / temperature).collect())
}

fn validate(logits: &[Vec<f64>], labels: &[usize]) -> Result<(), CalibrationError> {
    if logits.len() != labels.len() {
        return Err(CalibrationError::LengthMismatch {
            logits: logits.len(),
            labels: labels.len(),
        });
    }
    if logits.is_empty() {
        return Err(CalibrationError::Empty);
    }
    for (index, (l, &y)) in logits.iter().zip(labels).enumerate() {
        if y >= l.len() {
            return Err(CalibrationError::LabelOutOfRange {
                index,
                label: y,
                classes: l.len(),
            });
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(CalibrationError::NonFinite { index });
        }
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(logits / t)`; inputs assumed validated.
pub fn mean_nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let inv = 1.0 / t;
    let mut scaled = Vec::new();
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(l, &y)| {
            scaled.clear();
            scaled.extend(l.iter().map(|v| v * inv));
            log_sum_exp(&scaled) - scaled[y]
        })
        .sum();
    total / logits.len() as f64
}

pub fn fit_temperature(
    logits: &[Vec<f64>],
    labels: &[usize],
    target: TemperatureTarget,
) -> Result<Temperature, CalibrationError> {
    validate(logits, labels)?;
    let f = |log_t: f64| mean_nll(logits, labels, log_t.exp());

    let lo = MIN_TEMPERATURE.ln();
    let hi = MAX_TEMPERATURE.ln();
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| lo + step * i as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let best = values
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v < values[b] { i } else { b });

    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(GRID_POINTS - 1)];
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > LOG_T_TOLERANCE {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }

    let mut candidates = vec![(grid[best], values[best]), (c, fc), (d, fd), (0.0, f(0.0))];
    let mid = 0.5 * (a + b);
    candidates.push((mid, f(mid)));
    let (log_t, nll) = candidates
        .into_iter()
        .fold((0.0, f64::INFINITY), |acc, cand| if cand.1 < acc.1 { cand } else { acc });
    Ok(Temperature {
        value: log_t.exp(),
        target,
        calibration_nll: Some(nll),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{argmax, softmax_entropy};

    #[test]
    fn apply_temperature_arithmetic() {
        assert_eq!(apply_temperature(&[2.0, 0.0], 2.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(apply_temperature(&[1.5, -3.0], 1.0).unwrap(), vec![1.5, -3.0]);
        assert!(matches!(apply_temperature(&[1.0], 0.0), Err(CalibrationError::NonPositive(_))));
        assert!(matches!(apply_temperature(&[1.0], -1.0), Err(CalibrationError::NonPositive(_))));
    }

    #[test]
    fn huge_temperature_flattens_softmax() {
        let logits = [3.0, -1.0, 0.5, 7.0];
        let scaled = apply_temperature(&logits, 1e6).unwrap();
        let h = softmax_entropy(&scaled);
        assert!(((4f64).ln() - h).abs() < 1e-6);
    }

    #[test]
    fn argmax_survives_scaling() {
        let logits = [0.3, 2.5, -1.0, 2.4];
        for t in [0.01, 0.5, 1.0, 3.0, 100.0] {
            assert_eq!(argmax(&apply_temperature(&logits, t).unwrap()), argmax(&logits));
        }
    }

    #[test]
    fn input_errors() {
        assert!(matches!(
            fit_temperature(&[], &[], TemperatureTarget::DetectorLogits),
            Err(CalibrationError::Empty)
        ));
        assert!(matches!(
            fit_temperature(&[vec![1.0, 2.0]], &[2], TemperatureTarget::DetectorLogits),
            Err(CalibrationError::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn separable_data_pushes_temperature_down() {
        // Always-correct confident logits: sharper is better, so T hits the lower bound.
        let logits = vec![vec![5.0, 0.0]; 10];
        let t = fit_temperature(&logits, &[0; 10], TemperatureTarget::DetectorLogits).unwrap();
        assert!(t.value < 0.0101, "{}", t.value);
        assert!(t.calibration_nll.unwrap() <= mean_nll(&logits, &[0; 10], 1.0));
    }
}
