use std::f64::consts::TAU;

use rand::Rng;

use super::Matrix;

/// Fills a `rows × cols` matrix with independent N(0, 1) draws.
///
/// Uses the Box–Muller transform over uniform doubles from `rng`, filling
/// row-major: each pair of uniforms `(u1, u2)` with `u1 ∈ (0, 1]` yields
/// `√(−2 ln u1)·cos(2πu2)` followed by `√(−2 ln u1)·sin(2πu2)`. An odd
/// trailing entry uses the cosine branch only. Results depend only on the
/// rng stream and the platform `ln`/`sin`/`cos`, which agree to within an ulp.
pub fn standard_normal_sample<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let len = rows * cols;
    let mut data = Vec::with_capacity(len);
    while data.len() < len {
        let u1 = 1.0 - rng.random::<f64>();
        let u2 = rng.random::<f64>();
        let radius = (-2.0 * u1.ln()).sqrt();
        let (sin, cos) = (TAU * u2).sin_cos();
        data.push(radius * cos);
        if data.len() < len {
            data.push(radius * sin);
        }
    }
    Matrix::from_fn(rows, cols, |i, j| data[i * cols + j])
}
