use rand::Rng;

use super::{exact_svd, qr_decompose, standard_normal_sample, LinalgError, Matrix, SvdFactors};

/// Randomized SVD with a single-pass Gaussian sketch of width `sketch_size`.
///
/// `Ω` (k × c) is drawn from [`standard_normal_sample`]; the range basis `Q`
/// comes from the Householder QR of `Y = MΩ`; the small projection
/// `P = QᵀM` (c × k) is decomposed exactly and its left factor lifted back
/// through `Q`. No power iterations are performed: when `rank(M) ≤ c` the
/// sketch spans the column space of `M` and the result is exact up to
/// rounding.
pub fn randomized_svd<R: Rng + ?Sized>(
    m: &Matrix,
    sketch_size: usize,
    rng: &mut R,
) -> Result<SvdFactors, LinalgError> {
    let (d, k) = m.shape();
    let max = d.min(k);
    if sketch_size == 0 || sketch_size > max {
        return Err(LinalgError::SketchSize {
            sketch: sketch_size,
            max,
        });
    }
    m.ensure_finite("randomized svd input")?;
    let omega = standard_normal_sample(rng, k, sketch_size);
    let y = m.matmul(&omega)?;
    let basis = qr_decompose(&y)?.q;
    let projected = basis.t_matmul(m)?;
    let small = exact_svd(&projected)?;
    Ok(SvdFactors {
        u: basis.matmul(&small.u)?,
        sigma: small.sigma,
        v: small.v,
    })
}
