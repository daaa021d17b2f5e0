//! Numerically stable softmax-family helpers shared by training and
//! scoring.

use crate::error::{Error, Result};

/// log Σ exp(xᵢ), max-subtracted for stability.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// P(y) = exp(z_y/τ) / Σ exp(z/τ). Larger τ flattens the distribution.
pub fn softmax_with_temperature(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let scaled: Vec<f64> = z.iter().map(|v| v / tau).collect();
    let lse = log_sum_exp(&scaled);
    Ok(scaled.iter().map(|v| (v - lse).exp()).collect())
}

/// log softmax(z) at τ = 1.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| v - lse).collect()
}

/// exp of the mean per-token loss.
pub fn perplexity(sum_loss: f64, n_tokens: usize) -> f64 {
    assert!(n_tokens > 0, "perplexity over zero tokens");
    (sum_loss / n_tokens as f64).exp()
}
