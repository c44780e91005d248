//! One-sided Jacobi SVD.
//!
//! For a `d × k` input with `d ≥ k` the columns are orthogonalized by plane
//! rotations applied from the right (Hestenes' method) until every pair is
//! orthogonal to working precision; the rotations accumulate into `V`, and
//! the final column norms are the singular values. Tall inputs are first
//! reduced to their `k × k` triangular factor by Householder QR. Wide
//! inputs are handled by decomposing the transpose and swapping `U`/`V`.
//!
//! Output is thin (`t = min(d, k)` triplets), sorted non-increasing, with
//! the sign of each `U` column fixed so its first nonzero entry is positive.

use serde::{Deserialize, Serialize};

use super::{dot, qr_decompose, LinalgError, Matrix};

/// Upper bound on Jacobi sweeps before giving up.
pub const MAX_JACOBI_SWEEPS: usize = 80;

/// Entries below this magnitude are skipped when fixing column signs.
const SIGN_TOL: f64 = 1e-12;

/// Thin singular value decomposition `M = U diag(sigma) Vᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// `U diag(sigma) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_columns(&self.sigma)
            .matmul_t(&self.v)
            .expect("factor shapes are consistent")
    }

    /// Keeps the leading `t` triplets.
    pub fn truncate(&self, t: usize) -> SvdFactors {
        let t = t.min(self.len());
        SvdFactors {
            u: self.u.columns(0, t),
            sigma: self.sigma[..t].to_vec(),
            v: self.v.columns(0, t),
        }
    }

    /// Triplets `start..end` as a new factorization.
    pub fn slice(&self, start: usize, end: usize) -> SvdFactors {
        SvdFactors {
            u: self.u.columns(start, end),
            sigma: self.sigma[start..end].to_vec(),
            v: self.v.columns(start, end),
        }
    }
}

/// Full thin SVD; see the module docs for the algorithm and conventions.
pub fn exact_svd(m: &Matrix) -> Result<SvdFactors, LinalgError> {
    let (d, k) = m.shape();
    if d == 0 || k == 0 {
        return Err(LinalgError::Empty { rows: d, cols: k });
    }
    m.ensure_finite("svd input")?;
    let mut out = if d >= k {
        tall_svd(m)?
    } else {
        let t = tall_svd(&m.transpose())?;
        SvdFactors {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    };
    fix_signs(&mut out);
    Ok(out)
}

fn tall_svd(m: &Matrix) -> Result<SvdFactors, LinalgError> {
    let (d, k) = m.shape();
    if d > k {
        let qr = qr_decompose(m)?;
        let inner = square_jacobi(&qr.r)?;
        return Ok(SvdFactors {
            u: qr.q.matmul(&inner.u)?,
            sigma: inner.sigma,
            v: inner.v,
        });
    }
    square_jacobi(m)
}

/// Jacobi on a square (or tall) matrix without preconditioning.
fn square_jacobi(m: &Matrix) -> Result<SvdFactors, LinalgError> {
    let (d, k) = m.shape();
    debug_assert!(d >= k);
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| m.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON * d as f64;
    let mut converged = k < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_JACOBI_SWEEPS {
            return Err(LinalgError::NotConverged { sweeps });
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..k - 1 {
            for q in p + 1..k {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        converged = !rotated;
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let sigma_max = norms.iter().cloned().fold(0.0, f64::max);
    let floor = sigma_max * f64::EPSILON * d as f64;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let mut sigma = Vec::with_capacity(k);
    let mut ucols: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);
    let mut v_sorted = Vec::with_capacity(k);
    for &j in &order {
        let s = norms[j];
        if s > floor && s > 0.0 {
            sigma.push(s);
            ucols.push(Some(cols[j].iter().map(|x| x / s).collect()));
        } else {
            sigma.push(0.0);
            ucols.push(None);
        }
        v_sorted.push(vcols[j].clone());
    }
    let ucols = complete_basis(d, ucols);

    Ok(SvdFactors {
        u: Matrix::from_columns(d, &ucols),
        sigma,
        v: Matrix::from_columns(k, &v_sorted),
    })
}

#[inline]
fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the `None` slots with unit vectors orthogonal to every other column.
///
/// Candidates are the standard basis vectors, orthogonalized twice by
/// modified Gram–Schmidt; the one with the largest remainder wins (first
/// index on ties), which always exceeds `1/√d`.
fn complete_basis(d: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut out = Vec::with_capacity(cols.len());
    for col in cols {
        match col {
            Some(c) => out.push(c),
            None => {
                let mut best: Option<(f64, Vec<f64>)> = None;
                for i in 0..d {
                    let mut v = vec![0.0; d];
                    v[i] = 1.0;
                    for _ in 0..2 {
                        for b in &basis {
                            let proj = dot(b, &v);
                            for (vi, bi) in v.iter_mut().zip(b) {
                                *vi -= proj * bi;
                            }
                        }
                    }
                    let norm = dot(&v, &v).sqrt();
                    if best.as_ref().is_none_or(|(n, _)| norm > *n) {
                        best = Some((norm, v));
                    }
                }
                let (norm, mut v) = best.expect("d >= 1");
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v.clone());
                out.push(v);
            }
        }
    }
    out
}

fn fix_signs(f: &mut SvdFactors) {
    for j in 0..f.len() {
        let lead = (0..f.u.rows())
            .map(|i| f.u.get(i, j))
            .find(|x| x.abs() > SIGN_TOL);
        if matches!(lead, Some(x) if x < 0.0) {
            for i in 0..f.u.rows() {
                f.u.set(i, j, -f.u.get(i, j));
            }
            for i in 0..f.v.rows() {
                f.v.set(i, j, -f.v.get(i, j));
            }
        }
    }
}
