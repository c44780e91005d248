use super::{dot, LinalgError, Matrix};

/// Thin QR factors: `Q` is `d × c` with orthonormal columns, `R` is `c × c`
/// upper-triangular with a non-negative diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct QrFactors {
    pub q: Matrix,
    pub r: Matrix,
}

/// Thin Householder QR of a tall (or square) matrix.
///
/// A zero column leaves its reflector as the identity, so `Q` stays
/// orthonormal even for rank-deficient input. After factorization the signs
/// are normalized so that `R` has a non-negative diagonal.
pub fn qr_decompose(y: &Matrix) -> Result<QrFactors, LinalgError> {
    let (d, c) = y.shape();
    if d < c {
        return Err(LinalgError::WideQr { rows: d, cols: c });
    }
    y.ensure_finite("qr input")?;

    // column-major working copy
    let mut cols: Vec<Vec<f64>> = (0..c).map(|j| y.column(j)).collect();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(c);
    let mut r = Matrix::zeros(c, c);

    for j in 0..c {
        let x = &cols[j][j..];
        let norm = dot(x, x).sqrt();
        if !norm.is_finite() {
            return Err(LinalgError::NonFinite {
                context: "householder norm",
                row: j,
                col: j,
            });
        }
        if norm == 0.0 {
            reflectors.push(None);
            for (l, col) in cols.iter().enumerate().skip(j) {
                r.set(j, l, col[j]);
            }
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm = dot(&v, &v).sqrt();
        if vnorm == 0.0 {
            reflectors.push(None);
        } else {
            v.iter_mut().for_each(|e| *e /= vnorm);
            for col in cols.iter_mut().skip(j) {
                let tail = &mut col[j..];
                let proj = 2.0 * dot(&v, tail);
                for (t, vi) in tail.iter_mut().zip(&v) {
                    *t -= proj * vi;
                }
            }
            reflectors.push(Some(v));
        }
        for (l, col) in cols.iter().enumerate().skip(j) {
            r.set(j, l, col[j]);
        }
        // exact zeros below the diagonal
        cols[j][j + 1..].iter_mut().for_each(|e| *e = 0.0);
        r.set(j, j, alpha);
    }

    // Q = H_0 H_1 … H_{c−1} applied to the first c columns of the identity.
    let mut q_cols: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            e
        })
        .collect();
    for (j, refl) in reflectors.iter().enumerate().rev() {
        if let Some(v) = refl {
            for q in q_cols.iter_mut() {
                let tail = &mut q[j..];
                let proj = 2.0 * dot(v, tail);
                if proj != 0.0 {
                    for (t, vi) in tail.iter_mut().zip(v) {
                        *t -= proj * vi;
                    }
                }
            }
        }
    }

    for j in 0..c {
        if r.get(j, j) < 0.0 {
            for l in j..c {
                r.set(j, l, -r.get(j, l));
            }
            q_cols[j].iter_mut().for_each(|e| *e = -*e);
        }
    }

    let q = Matrix::from_columns(d, &q_cols);
    q.ensure_finite("qr output")?;
    r.ensure_finite("qr output")?;
    Ok(QrFactors { q, r })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::standard_normal_sample;
    use crate::rng::seeded_rng;

    fn orthonormality_error(q: &Matrix) -> f64 {
        q.t_matmul(q)
            .unwrap()
            .sub(&Matrix::identity(q.cols()))
            .unwrap()
            .frobenius_norm()
    }

    #[test]
    fn identity_factors_trivially() {
        let qr = qr_decompose(&Matrix::identity(3)).unwrap();
        assert_eq!(qr.q, Matrix::identity(3));
        assert_eq!(qr.r, Matrix::identity(3));
    }

    #[test]
    fn three_four_column() {
        let y = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let qr = qr_decompose(&y).unwrap();
        assert!((qr.q.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((qr.q.get(1, 0) - 0.8).abs() < 1e-15);
        assert!((qr.r.get(0, 0) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn random_tall_matrix() {
        let y = standard_normal_sample(&mut seeded_rng(7), 8, 3);
        let qr = qr_decompose(&y).unwrap();
        assert!(orthonormality_error(&qr.q) < 1e-12);
        let resid = qr.q.matmul(&qr.r).unwrap().sub(&y).unwrap().frobenius_norm();
        assert!(resid < 1e-12);
        for i in 0..3 {
            assert!(qr.r.get(i, i) >= 0.0);
            for j in 0..i {
                assert_eq!(qr.r.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn rank_deficient_input_keeps_orthonormal_q() {
        let mut y = standard_normal_sample(&mut seeded_rng(2), 6, 4);
        for i in 0..6 {
            y.set(i, 2, 0.0);
            y.set(i, 3, 2.0 * y.get(i, 0));
        }
        let qr = qr_decompose(&y).unwrap();
        assert!(orthonormality_error(&qr.q) < 1e-12);
        let resid = qr.q.matmul(&qr.r).unwrap().sub(&y).unwrap().frobenius_norm();
        assert!(resid < 1e-12 * y.frobenius_norm());
        let zero = qr_decompose(&Matrix::zeros(5, 3)).unwrap();
        assert!(orthonormality_error(&zero.q) < 1e-15);
        assert!(zero.r.is_zero());
    }

    #[test]
    fn wide_input_is_rejected() {
        assert!(matches!(
            qr_decompose(&Matrix::zeros(2, 3)),
            Err(LinalgError::WideQr { rows: 2, cols: 3 })
        ));
    }

    #[test]
    fn deterministic_bits() {
        let y = standard_normal_sample(&mut seeded_rng(5), 9, 4);
        assert_eq!(qr_decompose(&y).unwrap(), qr_decompose(&y).unwrap());
    }
}
