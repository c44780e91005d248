//! SVD-based aggregation: energy-threshold rank selection, balanced
//! reconstruction of the adapter, and residual extraction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{client_weights, validate_updates, weighted_sum, AggregationError, ClientUpdate, StrategyConfig};
use crate::linalg::{exact_svd, randomized_svd, Matrix, SvdFactors};
use crate::lora::{delta_weight, LoraAdapter};
use crate::rng::{derive_seed, seeded_rng, SimRng};

/// Picks `r_eff = min{t : E(t) ≥ τ}` with `E(t) = Σ_{j≤t} σ_j² / Σ_j σ_j²`,
/// clamped to `[r, max_rank]`, and returns `(r_eff, s = r_eff − r)`.
///
/// An all-zero spectrum yields `(r, 0)`.
pub fn select_residual_rank(
    sigma: &[f64],
    r: usize,
    tau: f64,
    max_rank: usize,
) -> Result<(usize, usize), AggregationError> {
    if r == 0 {
        return Err(AggregationError::ZeroRank);
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(AggregationError::InvalidTau(tau));
    }
    if max_rank < r {
        return Err(AggregationError::RankTooLarge {
            rank: r,
            available: max_rank,
        });
    }
    for (i, w) in sigma.windows(2).enumerate() {
        if w[1] > w[0] {
            return Err(AggregationError::UnsortedSpectrum { index: i + 1 });
        }
    }
    if let Some(i) = sigma.iter().position(|&s| !(s >= 0.0)) {
        return Err(AggregationError::UnsortedSpectrum { index: i });
    }

    let cumulative: Vec<f64> = sigma
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s * s;
            Some(*acc)
        })
        .collect();
    let total = cumulative.last().copied().unwrap_or(0.0);
    if total == 0.0 {
        return Ok((r, 0));
    }
    let first_hit = cumulative
        .iter()
        .position(|&c| c / total >= tau)
        .map_or(sigma.len(), |i| i + 1);
    let r_eff = first_hit.clamp(r, max_rank);
    Ok((r_eff, r_eff - r))
}

/// Result of decomposing one layer's aggregated delta.
///
/// `major` holds the leading `r` triplets, `residual` the next `s`; the
/// remaining `discarded_count` triplets of `sigma` are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposedUpdate {
    pub rank: usize,
    pub r_eff: usize,
    pub s: usize,
    /// Full spectrum returned by the decomposition (length = sketch size).
    pub sigma: Vec<f64>,
    pub energy_total: f64,
    pub energy_retained_fraction: f64,
    pub discarded_count: usize,
    pub balanced_split: bool,
    /// True when the sketch would not fit and the exact SVD was used.
    pub exact_fallback: bool,
    pub major: SvdFactors,
    pub residual: SvdFactors,
}

impl DecomposedUpdate {
    /// Major factors `(B, A)` with `B A = U_r Σ_r V_rᵀ`.
    ///
    /// Balanced: `B = U_r Σ_r^{1/2}`, `A = Σ_r^{1/2} V_rᵀ`.
    /// Unbalanced: `B = U_r Σ_r`, `A = V_rᵀ`.
    pub fn major_factors(&self) -> (Matrix, Matrix) {
        let m = &self.major;
        if self.balanced_split {
            let root: Vec<f64> = m.sigma.iter().map(|s| s.sqrt()).collect();
            (m.u.scale_columns(&root), m.v.scale_columns(&root).transpose())
        } else {
            (m.u.scale_columns(&m.sigma), m.v.transpose())
        }
    }

    /// `U_r Σ_r V_rᵀ`.
    pub fn major_dense(&self) -> Matrix {
        self.major.reconstruct()
    }

    /// Rank-`r` adapter whose effective delta equals [`Self::major_dense`].
    ///
    /// The `1/(α/r)` correction goes to both factors when balanced and to
    /// `B` alone otherwise, so `A = V_rᵀ` stays orthonormal in that case.
    pub fn to_adapter(&self, alpha: f64) -> Result<LoraAdapter, AggregationError> {
        let scale = alpha / self.rank as f64;
        let (b, a) = self.major_factors();
        let (b, a) = if self.balanced_split {
            let root = scale.sqrt();
            (b.scale(1.0 / root), a.scale(1.0 / root))
        } else {
            (b.scale(1.0 / scale), a)
        };
        Ok(LoraAdapter::new(a, b, alpha)?)
    }

    /// Residual in transport form `(U_s Σ_s^{1/2}, Σ_s^{1/2} V_sᵀ)`, if any.
    pub fn residual_factors(&self) -> Option<(Matrix, Matrix)> {
        if self.s == 0 {
            return None;
        }
        let res = &self.residual;
        let root: Vec<f64> = res.sigma.iter().map(|s| s.sqrt()).collect();
        Some((res.u.scale_columns(&root), res.v.scale_columns(&root).transpose()))
    }

    /// `U_s Σ_s V_sᵀ` (zero when `s = 0`).
    pub fn residual_dense(&self) -> Matrix {
        if self.s == 0 {
            return Matrix::zeros(self.major.u.rows(), self.major.v.rows());
        }
        self.residual.reconstruct()
    }

    pub fn discarded_energy(&self) -> f64 {
        self.sigma[self.r_eff..].iter().map(|s| s * s).sum()
    }
}

/// Decomposes an aggregated effective delta into major, residual and
/// negligible parts.
///
/// Uses [`randomized_svd`] with sketch size `n·r` when that fits inside
/// `min(d, k)`, otherwise the exact SVD (`n·r` then exceeds the attainable
/// rank anyway).
pub fn decompose_update(
    delta: &Matrix,
    r: usize,
    tau: f64,
    n: usize,
    rng: &mut SimRng,
    balanced_split: bool,
) -> Result<DecomposedUpdate, AggregationError> {
    if r == 0 {
        return Err(AggregationError::ZeroRank);
    }
    if n == 0 {
        return Err(AggregationError::ZeroClients);
    }
    let (d, k) = delta.shape();
    let limit = d.min(k);
    if r > limit {
        return Err(AggregationError::RankTooLarge { rank: r, available: limit });
    }
    let sketch = n * r;
    let exact_fallback = sketch > limit;
    let svd = if exact_fallback {
        exact_svd(delta)?
    } else {
        randomized_svd(delta, sketch, rng)?
    };
    let available = svd.len();
    let (r_eff, s) = select_residual_rank(&svd.sigma, r, tau, available)?;
    let energy_total: f64 = svd.sigma.iter().map(|s| s * s).sum();
    let retained: f64 = svd.sigma[..r_eff].iter().map(|s| s * s).sum();
    let energy_retained_fraction = if energy_total == 0.0 {
        1.0
    } else {
        (retained / energy_total).min(1.0)
    };
    Ok(DecomposedUpdate {
        rank: r,
        r_eff,
        s,
        energy_total,
        energy_retained_fraction,
        discarded_count: available - r_eff,
        balanced_split,
        exact_fallback,
        major: svd.truncate(r),
        residual: svd.slice(r, r_eff),
        sigma: svd.sigma,
    })
}

/// Output of one server-side aggregation round.
#[derive(Debug, Clone, PartialEq)]
pub struct FedMomentumOutcome {
    /// Rank-`r` adapters for the next round, one per layer.
    pub adapters: Vec<LoraAdapter>,
    /// Dense residuals for clients to merge into their backbones; `None`
    /// when there is nothing to merge.
    pub residuals: Vec<Option<Matrix>>,
    pub decompositions: Vec<DecomposedUpdate>,
}

/// Aggregates, decomposes and reconstructs every layer.
///
/// Layer `l` draws its sketch from `derive_seed(seed, [l])`, so the layers
/// can be processed in parallel with the same result as serially.
pub fn fedmomentum_round(
    updates: &[ClientUpdate],
    config: &StrategyConfig,
    seed: u64,
) -> Result<FedMomentumOutcome, AggregationError> {
    config.validate()?;
    let layers = validate_updates(updates)?;
    let n = updates.len();
    let per_layer: Vec<(LoraAdapter, Option<Matrix>, DecomposedUpdate)> = (0..layers)
        .into_par_iter()
        .map(|l| {
            layer_round(updates, config, seed, n, l).map_err(|e| AggregationError::Layer {
                layer: l,
                source: Box::new(e),
            })
        })
        .collect::<Result<_, AggregationError>>()?;

    let mut out = FedMomentumOutcome {
        adapters: Vec::with_capacity(layers),
        residuals: Vec::with_capacity(layers),
        decompositions: Vec::with_capacity(layers),
    };
    for (a, r, d) in per_layer {
        out.adapters.push(a);
        out.residuals.push(r);
        out.decompositions.push(d);
    }
    Ok(out)
}

fn layer_round(
    updates: &[ClientUpdate],
    config: &StrategyConfig,
    seed: u64,
    n: usize,
    l: usize,
) -> Result<(LoraAdapter, Option<Matrix>, DecomposedUpdate), AggregationError> {
    let weights = client_weights(updates, config.weighting);
    let sum = weighted_sum(updates, &weights, |u| delta_weight(&u.adapters[l]))?;
    let template = &updates[0].adapters[l];
    let mut rng = seeded_rng(derive_seed(seed, &[l as u64]));
    let dec = decompose_update(&sum, template.rank(), config.tau, n, &mut rng, config.balanced_split)?;
    let adapter = dec.to_adapter(template.alpha())?;
    let residual = (config.keep_residual && dec.s > 0).then(|| dec.residual_dense());
    Ok((adapter, residual, dec))
}
