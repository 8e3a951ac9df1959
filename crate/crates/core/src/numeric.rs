//! Log-space helpers.

use rand::Rng;

/// `ln sum_i exp(x_i)`, stable for large magnitudes; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalized probabilities from log-weights.
pub fn softmax(log_weights: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(log_weights);
    log_weights.iter().map(|l| (l - z).exp()).collect()
}

/// Cumulative distribution from log-weights; the last entry is exactly 1.
pub fn log_weights_to_cdf(log_weights: &[f64]) -> Vec<f64> {
    let probs = softmax(log_weights);
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    // Pin the tail so a uniform draw in [0, 1) always lands; skip trailing zero-mass cells.
    if let Some(last) = probs.iter().rposition(|&p| p > 0.0) {
        for c in &mut cdf[last..] {
            *c = 1.0;
        }
    }
    cdf
}

/// Inverse-CDF draw.
pub fn sample_cdf<R: Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    // first index with cdf > u
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
