//! Server-side aggregation of client LoRA updates.
//!
//! [`fedmomentum_round`] is the SVD-based aggregator: it sums the client
//! effective deltas exactly, decomposes the sum, rebuilds a rank-`r`
//! adapter from the leading triplets and hands the next block of triplets
//! (chosen by an energy threshold) back as a residual to merge into the
//! backbone. The five baselines live in [`baselines`]; [`comm`] holds the
//! per-round communication accounting for all six.

pub mod baselines;
pub mod comm;
mod decompose;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::lora::{delta_weight, LoraAdapter, LoraError};

pub use baselines::{
    fedex_aggregate, fedit_aggregate, ffa_aggregate, flora_aggregate, rolora_aggregate,
    rolora_trains_b,
};
pub use comm::{comm_cost, comm_cost_per_layer, CommReport};
pub use decompose::{
    decompose_update, fedmomentum_round, select_residual_rank, DecomposedUpdate,
    FedMomentumOutcome,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregationError {
    #[error("no client updates")]
    NoUpdates,
    #[error("client {client} has {got} layers, expected {expected}")]
    LayerCount {
        client: usize,
        expected: usize,
        got: usize,
    },
    #[error("client {client}, layer {layer}: adapter shape or alpha differs from client 0")]
    LayerMismatch { client: usize, layer: usize },
    #[error("client {client} reports zero samples")]
    ZeroSamples { client: usize },
    #[error("tau must be in (0, 1], got {0}")]
    InvalidTau(f64),
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("rank {rank} exceeds the available {available} singular triplets")]
    RankTooLarge { rank: usize, available: usize },
    #[error("spectrum must be non-negative and non-increasing (violated at index {index})")]
    UnsortedSpectrum { index: usize },
    #[error("layer {layer}: clients disagree on the frozen factor")]
    FixedFactorMismatch { layer: usize },
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<AggregationError>,
    },
    #[error("no layer shapes given")]
    NoLayers,
    #[error("client count must be at least 1")]
    ZeroClients,
    #[error("residual rank {s} exceeds (n-1)r = {max}")]
    ResidualTooLarge { s: usize, max: usize },
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Aggregation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "fedmomentum")]
    FedMomentum,
    #[serde(rename = "fedit")]
    FedIt,
    #[serde(rename = "flora")]
    Flora,
    #[serde(rename = "ffa_lora")]
    FfaLora,
    #[serde(rename = "rolora")]
    RoLora,
    #[serde(rename = "fedex_lora")]
    FedExLora,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FedMomentum,
        Method::FedIt,
        Method::Flora,
        Method::FfaLora,
        Method::RoLora,
        Method::FedExLora,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedMomentum => "fedmomentum",
            Method::FedIt => "fedit",
            Method::Flora => "flora",
            Method::FfaLora => "ffa_lora",
            Method::RoLora => "rolora",
            Method::FedExLora => "fedex_lora",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = AggregationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| AggregationError::UnknownMethod(s.to_string()))
    }
}

/// Client weights `w_i` used when combining updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w_i = 1/n`.
    #[default]
    #[serde(alias = "mean")]
    UniformMean,
    /// `w_i = n_i / Σ n_j`.
    #[serde(alias = "samples")]
    SampleWeighted,
    /// `w_i = 1`, a plain sum.
    #[serde(alias = "sum")]
    UnweightedSum,
}

/// Server-side strategy settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub method: Method,
    pub tau: f64,
    pub balanced_split: bool,
    pub keep_residual: bool,
    pub weighting: Weighting,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            method: Method::FedMomentum,
            tau: 0.9999,
            balanced_split: true,
            keep_residual: true,
            weighting: Weighting::UniformMean,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), AggregationError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(AggregationError::InvalidTau(self.tau));
        }
        Ok(())
    }
}

/// One client's per-layer adapters after local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub sample_count: usize,
    pub adapters: Vec<LoraAdapter>,
}

/// Checks that all updates agree on layer count, shapes and alpha.
pub(crate) fn validate_updates(updates: &[ClientUpdate]) -> Result<usize, AggregationError> {
    let first = updates.first().ok_or(AggregationError::NoUpdates)?;
    let layers = first.adapters.len();
    for (ci, u) in updates.iter().enumerate() {
        if u.sample_count == 0 {
            return Err(AggregationError::ZeroSamples { client: ci });
        }
        if u.adapters.len() != layers {
            return Err(AggregationError::LayerCount {
                client: ci,
                expected: layers,
                got: u.adapters.len(),
            });
        }
        for (l, (a, a0)) in u.adapters.iter().zip(&first.adapters).enumerate() {
            if a.a().shape() != a0.a().shape()
                || a.b().shape() != a0.b().shape()
                || a.alpha() != a0.alpha()
            {
                return Err(AggregationError::LayerMismatch { client: ci, layer: l });
            }
        }
    }
    Ok(layers)
}

/// Per-client weights for the given scheme.
pub fn client_weights(updates: &[ClientUpdate], weighting: Weighting) -> Vec<f64> {
    let n = updates.len() as f64;
    match weighting {
        Weighting::UniformMean => vec![1.0 / n; updates.len()],
        Weighting::UnweightedSum => vec![1.0; updates.len()],
        Weighting::SampleWeighted => {
            let total: usize = updates.iter().map(|u| u.sample_count).sum();
            updates
                .iter()
                .map(|u| u.sample_count as f64 / total as f64)
                .collect()
        }
    }
}

/// `Σ w_i · f(update_i)` accumulated in client order.
pub(crate) fn weighted_sum<F>(updates: &[ClientUpdate], weights: &[f64], mut f: F) -> Result<Matrix, AggregationError>
where
    F: FnMut(&ClientUpdate) -> Matrix,
{
    let mut iter = updates.iter().zip(weights);
    let (u0, &w0) = iter.next().ok_or(AggregationError::NoUpdates)?;
    let mut acc = f(u0).scale(w0);
    for (u, &w) in iter {
        acc.axpy(w, &f(u))?;
    }
    Ok(acc)
}

/// Per-layer `Σ w_i · ΔW_i` over the clients' effective deltas.
pub fn sum_updates(updates: &[ClientUpdate], weighting: Weighting) -> Result<Vec<Matrix>, AggregationError> {
    let layers = validate_updates(updates)?;
    let weights = client_weights(updates, weighting);
    (0..layers)
        .map(|l| weighted_sum(updates, &weights, |u| delta_weight(&u.adapters[l])))
        .collect()
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn single_client_mean_is_its_delta() {
        let ups = random_updates(1, 1, &[(5, 4)], 2, 4.0);
        let sum = sum_updates(&ups, Weighting::UniformMean).unwrap();
        assert_eq!(sum[0], delta_weight(&ups[0].adapters[0]));
    }

    #[test]
    fn opposite_deltas_cancel() {
        let mut ups = random_updates(2, 1, &[(4, 4)], 2, 2.0);
        let neg = ups[0].adapters[0].with_b(ups[0].adapters[0].b().scale(-1.0)).unwrap();
        ups.push(ClientUpdate {
            client_id: 1,
            sample_count: 1,
            adapters: vec![neg],
        });
        let sum = sum_updates(&ups, Weighting::UniformMean).unwrap();
        assert!(sum[0].is_zero());
    }

    #[test]
    fn sample_weighting_matches_dense_oracle() {
        let ups = random_updates(3, 3, &[(6, 5)], 2, 4.0);
        let sum = sum_updates(&ups, Weighting::SampleWeighted).unwrap();
        let mut oracle = Matrix::zeros(6, 5);
        for (i, u) in ups.iter().enumerate() {
            let dense = u.adapters[0].b().matmul(u.adapters[0].a()).unwrap().scale(2.0);
            oracle.axpy((i + 1) as f64 / 6.0, &dense).unwrap();
        }
        assert!(sum[0].sub(&oracle).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn unweighted_sum_is_literal() {
        let ups = random_updates(4, 3, &[(3, 3)], 1, 1.0);
        let sum = sum_updates(&ups, Weighting::UnweightedSum).unwrap();
        let mean = sum_updates(&ups, Weighting::UniformMean).unwrap();
        assert!(sum[0].sub(&mean[0].scale(3.0)).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        assert_eq!(sum_updates(&[], Weighting::UniformMean), Err(AggregationError::NoUpdates));
        let mut ups = random_updates(5, 2, &[(4, 3)], 1, 1.0);
        ups[1].adapters = random_updates(6, 1, &[(4, 4)], 1, 1.0).remove(0).adapters;
        assert!(matches!(
            sum_updates(&ups, Weighting::UniformMean),
            Err(AggregationError::LayerMismatch { client: 1, layer: 0 })
        ));
        let mut ups = random_updates(5, 2, &[(4, 3)], 1, 1.0);
        ups[0].sample_count = 0;
        assert!(matches!(
            sum_updates(&ups, Weighting::UniformMean),
            Err(AggregationError::ZeroSamples { client: 0 })
        ));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!(matches!("fedavg".parse::<Method>(), Err(AggregationError::UnknownMethod(_))));
    }
}
