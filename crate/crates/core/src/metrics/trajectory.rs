//! Joint PCA of weight-update trajectories and the loss landscape over
//! the resulting plane.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::linalg::{exact_svd, Matrix};

/// One cumulative weight change to be placed on the PCA plane.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryInput {
    pub round_index: usize,
    pub method: String,
    pub delta: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub round_index: usize,
    pub method: String,
    pub coords: [f64; 2],
    /// Normalized loss at this point, clipped to `[0, 1]`; `NaN` until
    /// [`TrajectoryPca::attach_losses`] is called.
    pub loss: f64,
}

/// Result of a joint PCA over all trajectory inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPca {
    pub shape: (usize, usize),
    /// Joint mean of the flattened inputs.
    pub mean: Vec<f64>,
    /// Two orthonormal principal directions (flattened, row-major).
    pub axes: [Vec<f64>; 2],
    /// Singular values of the centered data along `axes`.
    pub spread: [f64; 2],
    /// All inputs were identical; every point sits at the origin.
    pub degenerate: bool,
    pub points: Vec<TrajectoryPoint>,
}

/// Flattens, centers by the joint mean and projects onto the top two
/// principal directions (right singular vectors of the centered data).
pub fn trajectory_pca(inputs: &[TrajectoryInput]) -> Result<TrajectoryPca, MetricsError> {
    if inputs.len() < 2 {
        return Err(MetricsError::TooFewPoints(inputs.len()));
    }
    let shape = inputs[0].delta.shape();
    if let Some(bad) = inputs.iter().find(|t| t.delta.shape() != shape) {
        return Err(MetricsError::ShapeMismatch {
            expected: shape,
            got: bad.delta.shape(),
        });
    }
    let m = inputs.len();
    let dim = shape.0 * shape.1;
    let mut mean = vec![0.0; dim];
    for t in inputs {
        for (acc, v) in mean.iter_mut().zip(t.delta.as_slice()) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    let centered = Matrix::from_fn(m, dim, |i, j| inputs[i].delta.as_slice()[j] - mean[j]);

    let mut axes = [vec![0.0; dim], vec![0.0; dim]];
    let mut spread = [0.0; 2];
    let degenerate = centered.is_zero();
    if !degenerate {
        let svd = exact_svd(&centered)?;
        for (c, (axis, sp)) in axes.iter_mut().zip(spread.iter_mut()).enumerate() {
            if c < svd.sigma.len() {
                *axis = svd.v.column(c);
                *sp = svd.sigma[c];
            }
        }
        // a direction with no spread carries an arbitrary completion vector;
        // zero it so coordinates along it are exactly 0
        for c in 0..2 {
            if spread[c] <= f64::EPSILON * spread[0] * (m.max(dim) as f64) {
                spread[c] = 0.0;
            }
        }
    }

    let points = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let row = centered.row(i);
            let coords = if degenerate {
                [0.0, 0.0]
            } else {
                [0, 1].map(|c| if spread[c] > 0.0 { dot(row, &axes[c]) } else { 0.0 })
            };
            TrajectoryPoint {
                round_index: t.round_index,
                method: t.method.clone(),
                coords,
                loss: f64::NAN,
            }
        })
        .collect();

    Ok(TrajectoryPca {
        shape,
        mean,
        axes,
        spread,
        degenerate,
        points,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl TrajectoryPca {
    /// The weight change at plane coordinates `coords`.
    pub fn lift(&self, coords: [f64; 2]) -> Matrix {
        let data = (0..self.mean.len())
            .map(|j| self.mean[j] + coords[0] * self.axes[0][j] + coords[1] * self.axes[1][j])
            .collect();
        Matrix::new(self.shape.0, self.shape.1, data).expect("mean has the recorded shape")
    }

    /// Fills each point's loss with `clip(loss_fn(ΔW) / reference, 0, 1)`,
    /// evaluated at the point's lifted position on the plane.
    pub fn attach_losses<F>(&mut self, reference: f64, loss_fn: F)
    where
        F: Fn(&Matrix) -> f64 + Sync,
    {
        let values: Vec<f64> = self
            .points
            .par_iter()
            .map(|p| normalize_loss(loss_fn(&self.lift(p.coords)), reference))
            .collect();
        for (p, v) in self.points.iter_mut().zip(values) {
            p.loss = v;
        }
    }
}

fn normalize_loss(loss: f64, reference: f64) -> f64 {
    let v = if reference > 0.0 { loss / reference } else { loss };
    if v.is_nan() {
        1.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Grid resolution and padding for the landscape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub resolution: usize,
    /// Fractional expansion of the points' bounding box on each side.
    pub margin: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            resolution: 41,
            margin: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub ix: usize,
    pub iy: usize,
    pub x: f64,
    pub y: f64,
    pub loss: f64,
}

/// Evaluates the normalized, clipped loss on a `resolution × resolution`
/// grid covering the trajectory's bounding box plus `margin` per side.
pub fn landscape_grid<F>(pca: &TrajectoryPca, grid: GridSpec, reference: f64, loss_fn: F) -> Vec<GridCell>
where
    F: Fn(&Matrix) -> f64 + Sync,
{
    if grid.resolution == 0 || pca.points.is_empty() {
        return Vec::new();
    }
    let range = |c: usize| {
        let lo = pca.points.iter().map(|p| p.coords[c]).fold(f64::INFINITY, f64::min);
        let hi = pca.points.iter().map(|p| p.coords[c]).fold(f64::NEG_INFINITY, f64::max);
        // a flat axis still gets a unit-width window
        let width = if hi > lo { hi - lo } else { 1.0 };
        (lo - grid.margin * width, hi + grid.margin * width)
    };
    let (x0, x1) = range(0);
    let (y0, y1) = range(1);
    let at = |lo: f64, hi: f64, i: usize| {
        if grid.resolution == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (grid.resolution - 1) as f64
        }
    };
    let n = grid.resolution;
    (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let (iy, ix) = (idx / n, idx % n);
            let (x, y) = (at(x0, x1, ix), at(y0, y1, iy));
            GridCell {
                ix,
                iy,
                x,
                y,
                loss: normalize_loss(loss_fn(&pca.lift([x, y])), reference),
            }
        })
        .collect()
}
