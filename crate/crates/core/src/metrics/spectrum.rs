use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Singular spectrum of one layer's aggregated update in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumLog {
    pub round_index: usize,
    pub layer_id: usize,
    /// Non-increasing.
    pub sigma: Vec<f64>,
    pub r_eff: usize,
    pub s: usize,
}

/// Entropy effective rank `exp(−Σ p_i ln p_i)` with `p_i = σ_i / Σ σ_j`.
///
/// Zero entries contribute nothing (`0 · ln 0 := 0`), so the value lies in
/// `[1, #nonzero]`.
pub fn effective_rank(sigma: &[f64]) -> Result<f64, MetricsError> {
    if let Some(i) = sigma.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(MetricsError::InvalidSpectrum { index: i });
    }
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return Err(MetricsError::ZeroSpectrum);
    }
    let entropy: f64 = sigma
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    // rounding can push the exponent a hair outside [1, #nonzero]
    let nonzero = sigma.iter().filter(|&&s| s > 0.0).count() as f64;
    Ok(entropy.exp().clamp(1.0, nonzero))
}

/// Residual-rank summary across layers for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRankRow {
    pub round_index: usize,
    pub mean_s: f64,
    pub min_s: usize,
    pub max_s: usize,
}

/// Per-round (mean, min, max) of `s` across layers, in round order.
///
/// Rounds must be contiguous from the first logged round; a gap means a
/// round produced no logs and is reported as an error.
pub fn residual_rank_stats(logs: &[SpectrumLog]) -> Result<Vec<ResidualRankRow>, MetricsError> {
    let Some(first) = logs.iter().map(|l| l.round_index).min() else {
        return Ok(Vec::new());
    };
    let last = logs.iter().map(|l| l.round_index).max().expect("non-empty");
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); last - first + 1];
    for log in logs {
        buckets[log.round_index - first].push(log.s);
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            if s.is_empty() {
                return Err(MetricsError::EmptyRound(first + i));
            }
            Ok(ResidualRankRow {
                round_index: first + i,
                mean_s: s.iter().sum::<usize>() as f64 / s.len() as f64,
                min_s: *s.iter().min().expect("non-empty"),
                max_s: *s.iter().max().expect("non-empty"),
            })
        })
        .collect()
}
