//! Baseline aggregation strategies.
//!
//! | strategy   | server step                                         | exact? |
//! |------------|-----------------------------------------------------|--------|
//! | FedIT      | average `A` and `B` separately                      | no     |
//! | FLoRA      | merge `Σ w_i ΔW_i` into the backbone, re-init       | yes    |
//! | FFA-LoRA   | average `B`, `A` frozen from initialization         | yes    |
//! | RoLoRA     | alternate: average `B` (even rounds) or `A` (odd)   | yes    |
//! | FedEx-LoRA | FedIT plus a dense correction merged into backbone  | yes    |

use rand::Rng;

use super::{client_weights, sum_updates, validate_updates, weighted_sum, AggregationError, ClientUpdate, Weighting};
use crate::linalg::Matrix;
use crate::lora::{delta_weight, init_adapter, InitScheme, LoraAdapter};

/// Separate averaging: `Ā = Σ w_i A_i`, `B̄ = Σ w_i B_i`.
pub fn fedit_aggregate(updates: &[ClientUpdate], weighting: Weighting) -> Result<Vec<LoraAdapter>, AggregationError> {
    let layers = validate_updates(updates)?;
    let w = client_weights(updates, weighting);
    (0..layers)
        .map(|l| {
            let a = weighted_sum(updates, &w, |u| u.adapters[l].a().clone())?;
            let b = weighted_sum(updates, &w, |u| u.adapters[l].b().clone())?;
            Ok(LoraAdapter::new(a, b, updates[0].adapters[l].alpha())?)
        })
        .collect()
}

/// Merge-and-reinitialize: returns the per-layer backbone deltas
/// `Σ w_i ΔW_i` and freshly drawn adapters.
pub fn flora_aggregate<R: Rng + ?Sized>(
    updates: &[ClientUpdate],
    weighting: Weighting,
    scheme: InitScheme,
    rng: &mut R,
) -> Result<(Vec<Matrix>, Vec<LoraAdapter>), AggregationError> {
    let deltas = sum_updates(updates, weighting)?;
    let fresh = updates[0]
        .adapters
        .iter()
        .map(|t| init_adapter(t.d(), t.k(), t.rank(), t.alpha(), scheme, rng))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((deltas, fresh))
}

/// `B̄ = Σ w_i B_i` paired with the frozen `A`.
pub fn ffa_aggregate(
    updates: &[ClientUpdate],
    frozen_a: &[Matrix],
    weighting: Weighting,
) -> Result<Vec<LoraAdapter>, AggregationError> {
    let layers = validate_updates(updates)?;
    if frozen_a.len() != layers {
        return Err(AggregationError::LayerCount {
            client: 0,
            expected: layers,
            got: frozen_a.len(),
        });
    }
    let w = client_weights(updates, weighting);
    (0..layers)
        .map(|l| {
            let b = weighted_sum(updates, &w, |u| u.adapters[l].b().clone())?;
            Ok(LoraAdapter::new(frozen_a[l].clone(), b, updates[0].adapters[l].alpha())?)
        })
        .collect()
}

/// Whether clients train (and the server averages) `B` in this round.
pub fn rolora_trains_b(round_index: usize) -> bool {
    round_index % 2 == 0
}

/// Averages the factor trained this round and broadcasts the other one
/// unchanged. The held factor must be identical across clients.
pub fn rolora_aggregate(
    updates: &[ClientUpdate],
    round_index: usize,
    weighting: Weighting,
) -> Result<Vec<LoraAdapter>, AggregationError> {
    let layers = validate_updates(updates)?;
    let w = client_weights(updates, weighting);
    let trains_b = rolora_trains_b(round_index);
    (0..layers)
        .map(|l| {
            let first = &updates[0].adapters[l];
            let held_matches = updates.iter().all(|u| {
                let ad = &u.adapters[l];
                if trains_b {
                    ad.a() == first.a()
                } else {
                    ad.b() == first.b()
                }
            });
            if !held_matches {
                return Err(AggregationError::FixedFactorMismatch { layer: l });
            }
            if trains_b {
                let b = weighted_sum(updates, &w, |u| u.adapters[l].b().clone())?;
                Ok(first.with_b(b)?)
            } else {
                let a = weighted_sum(updates, &w, |u| u.adapters[l].a().clone())?;
                Ok(first.with_a(a)?)
            }
        })
        .collect()
}

/// FedIT averaging plus the dense correction `R = Σ w_i ΔW_i − ΔW(B̄, Ā)`
/// per layer, which makes the merged global update exact.
pub fn fedex_aggregate(
    updates: &[ClientUpdate],
    weighting: Weighting,
) -> Result<(Vec<LoraAdapter>, Vec<Matrix>), AggregationError> {
    let adapters = fedit_aggregate(updates, weighting)?;
    let exact = sum_updates(updates, weighting)?;
    let residuals = exact
        .iter()
        .zip(&adapters)
        .map(|(target, ad)| target.sub(&delta_weight(ad)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((adapters, residuals))
}
