//! Dirichlet-skewed split of the sample pool across clients.
//!
//! Client shares `p ~ Dir(β·1)` are turned into integer counts by
//! largest-remainder rounding; every client is guaranteed at least one
//! sample (taken from the largest share). Each client then receives a
//! contiguous block of indices, so with an input shift the clients also
//! see different input distributions. Small `β` gives very unequal
//! shares, large `β` approaches an even split.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::SimError;

/// Sample indices owned by one client, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Splits `total` samples across `n` clients with concentration `beta`.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    total: usize,
    n: usize,
    beta: f64,
    rng: &mut R,
) -> Result<Vec<ClientDataset>, SimError> {
    if n == 0 {
        return Err(SimError::InvalidConfig(vec!["client count must be >= 1".into()]));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(SimError::InvalidConfig(vec![format!("beta must be positive and finite, got {beta}")]));
    }
    if total < n {
        return Err(SimError::InvalidConfig(vec![format!(
            "{total} samples cannot cover {n} clients"
        )]));
    }

    let gamma = Gamma::new(beta, 1.0).expect("beta validated above");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    let shares: Vec<f64> = if sum > 0.0 && sum.is_finite() {
        draws.iter().map(|g| g / sum).collect()
    } else {
        // every gamma draw underflowed; fall back to an even split
        vec![1.0 / n as f64; n]
    };

    let counts = round_counts(&shares, total);
    let mut start = 0;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(client_id, c)| {
            let indices = (start..start + c).collect();
            start += c;
            ClientDataset { client_id, indices }
        })
        .collect())
}

/// Largest-remainder rounding of `shares · total`, then topping up empty
/// clients from the largest count. Requires `total >= shares.len()`.
fn round_counts(shares: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = shares.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    // stable: ties keep the lower client index first
    order.sort_by(|&i, &j| {
        let fi = exact[i] - exact[i].floor();
        let fj = exact[j] - exact[j].floor();
        fj.total_cmp(&fi)
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }

    for i in 0..counts.len() {
        if counts[i] == 0 {
            let donor = (0..counts.len())
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .expect("non-empty");
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }
    counts
}
