//! Per-round, per-client communication volume (parameter counts).
//!
//! With `p_lora = Σ_ℓ r (d_ℓ + k_ℓ)` and `p_full = Σ_ℓ d_ℓ k_ℓ`:
//!
//! - FedIT: `p_lora` up, `p_lora` down.
//! - FLoRA: `p_lora` up, `n · p_lora` down (stacked rank-`nr` adapter).
//! - FFA-LoRA: `B` only in both directions, `Σ_ℓ r d_ℓ` each way.
//! - FedEx-LoRA: `p_lora` up, `p_lora + p_full` down (dense residual).
//! - FedMomentum: `p_lora` up, `Σ_ℓ (r + s_ℓ)(d_ℓ + k_ℓ)` down, i.e.
//!   `(1 + λn) · p_lora` with `λ = (r + s)/(nr)` for a uniform `s`.
//! - RoLoRA: one factor per round each way; reported as the two-round
//!   average `p_lora/2` up and down and flagged `extrapolated`.

use serde::{Deserialize, Serialize};

use super::{AggregationError, Method};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommReport {
    pub method: Method,
    pub p_lora: u64,
    pub p_full: u64,
    pub uplink: u64,
    pub downlink: u64,
    pub total: u64,
    /// `downlink / (n · p_lora)`; FedMomentum only.
    pub lambda: Option<f64>,
    /// The figure is a modelling choice rather than a closed form.
    pub extrapolated: bool,
}

/// Communication cost with the same residual rank `s` on every layer.
pub fn comm_cost(
    method: Method,
    shapes: &[(usize, usize)],
    r: usize,
    s: usize,
    n: usize,
) -> Result<CommReport, AggregationError> {
    comm_cost_per_layer(method, shapes, r, &vec![s; shapes.len()], n)
}

/// Communication cost with a residual rank per layer (FedMomentum only
/// reads `residual_ranks`).
pub fn comm_cost_per_layer(
    method: Method,
    shapes: &[(usize, usize)],
    r: usize,
    residual_ranks: &[usize],
    n: usize,
) -> Result<CommReport, AggregationError> {
    if shapes.is_empty() {
        return Err(AggregationError::NoLayers);
    }
    if r == 0 {
        return Err(AggregationError::ZeroRank);
    }
    if n == 0 {
        return Err(AggregationError::ZeroClients);
    }
    if residual_ranks.len() != shapes.len() {
        return Err(AggregationError::LayerCount {
            client: 0,
            expected: shapes.len(),
            got: residual_ranks.len(),
        });
    }
    let r64 = r as u64;
    let n64 = n as u64;
    let p_lora: u64 = shapes.iter().map(|&(d, k)| r64 * (d + k) as u64).sum();
    let p_full: u64 = shapes.iter().map(|&(d, k)| (d * k) as u64).sum();

    let mut lambda = None;
    let mut extrapolated = false;
    let (uplink, downlink) = match method {
        Method::FedIt => (p_lora, p_lora),
        Method::Flora => (p_lora, n64 * p_lora),
        Method::FfaLora => {
            let b_only: u64 = shapes.iter().map(|&(d, _)| r64 * d as u64).sum();
            (b_only, b_only)
        }
        Method::FedExLora => (p_lora, p_lora + p_full),
        Method::RoLora => {
            extrapolated = true;
            let up = p_lora / 2;
            (up, p_lora - up)
        }
        Method::FedMomentum => {
            let max_s = (n - 1) * r;
            let mut down = 0u64;
            for (&(d, k), &s) in shapes.iter().zip(residual_ranks) {
                if s > max_s {
                    return Err(AggregationError::ResidualTooLarge { s, max: max_s });
                }
                down += (r + s) as u64 * (d + k) as u64;
            }
            lambda = Some(down as f64 / (n64 * p_lora) as f64);
            (p_lora, down)
        }
    };
    Ok(CommReport {
        method,
        p_lora,
        p_full,
        uplink,
        downlink,
        total: uplink + downlink,
        lambda,
        extrapolated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fedmomentum_without_residual_matches_fedit() {
        for n in 1..8 {
            let fm = comm_cost(Method::FedMomentum, &[(32, 48), (16, 16)], 4, 0, n).unwrap();
            let it = comm_cost(Method::FedIt, &[(32, 48), (16, 16)], 4, 0, n).unwrap();
            assert_eq!(fm.total, 2 * fm.p_lora);
            assert_eq!(fm.total, it.total);
            assert_eq!(fm.lambda, Some(1.0 / n as f64));
        }
    }

    #[test]
    fn fedmomentum_full_residual_matches_flora() {
        let (n, r) = (5, 3);
        let fm = comm_cost(Method::FedMomentum, &[(20, 30)], r, (n - 1) * r, n).unwrap();
        let fl = comm_cost(Method::Flora, &[(20, 30)], r, 0, n).unwrap();
        assert_eq!(fm.total, (1 + n as u64) * fm.p_lora);
        assert_eq!(fm.total, fl.total);
        assert_eq!(fm.lambda, Some(1.0));
        assert!(comm_cost(Method::FedMomentum, &[(20, 30)], r, (n - 1) * r + 1, n).is_err());
    }

    #[test]
    fn fedex_single_layer() {
        let c = comm_cost(Method::FedExLora, &[(16, 16)], 2, 0, 4).unwrap();
        assert_eq!((c.p_lora, c.p_full, c.total), (64, 256, 384));
    }

    #[test]
    fn ffa_and_rolora() {
        let ffa = comm_cost(Method::FfaLora, &[(16, 16)], 2, 0, 4).unwrap();
        assert_eq!(ffa.total, ffa.p_lora);
        let ro = comm_cost(Method::RoLora, &[(16, 16)], 2, 0, 4).unwrap();
        assert_eq!(ro.total, ro.p_lora);
        assert!(ro.extrapolated);
        assert!(!ffa.extrapolated);
    }

    #[test]
    fn invalid_arguments() {
        assert!(matches!(comm_cost(Method::FedIt, &[], 2, 0, 4), Err(AggregationError::NoLayers)));
        assert!(comm_cost(Method::FedIt, &[(4, 4)], 0, 0, 4).is_err());
        assert!(comm_cost(Method::FedIt, &[(4, 4)], 1, 0, 0).is_err());
    }
}
