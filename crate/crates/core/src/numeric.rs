//! Small numerically careful helpers shared by several modules.

/// `ln(sum(exp(v)))`, shifted by the maximum so that no finite input overflows.
///
/// Returns `-inf` for an empty slice or when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax written into `out`.
pub fn softmax_into(values: &[f64], out: &mut [f64]) {
    debug_assert_eq!(values.len(), out.len());
    let lse = log_sum_exp(values);
    for (o, v) in out.iter_mut().zip(values) {
        *o = (v - lse).exp();
    }
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    softmax_into(values, &mut out);
    out
}

/// Shannon entropy (natural log) of `softmax(values)`.
pub fn softmax_entropy(values: &[f64]) -> f64 {
    let lse = log_sum_exp(values);
    let h: f64 = values
        .iter()
        .map(|v| {
            let log_p = v - lse;
            let p = log_p.exp();
            if p > 0.0 {
                -p * log_p
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}

/// Logistic function evaluated without overflow on either tail.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] for `p` in `(0, 1)`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Index of the first maximum. Panics on an empty slice.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
