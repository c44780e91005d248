//! Low-rank adapters over frozen dense layers.
//!
//! A layer computes `Y = W X + (α/r) · B (A X)` with `W` (d × k) frozen,
//! `A` (r × k) and `B` (d × r) trainable. Throughout the crate the
//! *effective delta* of an adapter is `(α/r) · B A`; aggregation, SVD and
//! merging all work in that space.
//!
//! Adapters serialize to a flat JSON record:
//!
//! ```json
//! {"d": 4, "k": 3, "r": 2, "alpha": 16.0, "a": [/* r*k, row-major */], "b": [/* d*r, row-major */]}
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{standard_normal_sample, LinalgError, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoraError {
    #[error("rank {r} must be in 1..=min({d}, {k})")]
    InvalidRank { r: usize, d: usize, k: usize },
    #[error("alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn expect_shape(what: &'static str, m: &Matrix, expected: (usize, usize)) -> Result<(), LoraError> {
    if m.shape() != expected {
        return Err(LoraError::Shape {
            what,
            expected,
            got: m.shape(),
        });
    }
    Ok(())
}

/// Frozen backbone weight of one dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneLayer {
    pub weight: Matrix,
}

impl BackboneLayer {
    pub fn new(weight: Matrix) -> Self {
        Self { weight }
    }

    pub fn d(&self) -> usize {
        self.weight.rows()
    }

    pub fn k(&self) -> usize {
        self.weight.cols()
    }
}

/// How the factors are drawn at initialization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `A ~ N(0, 1/r)`, `B = 0`: the adapter starts with a zero delta.
    #[default]
    ZeroB,
    /// Both factors `~ N(0, 1/r)`.
    BothRandom,
}

/// Trainable pair `(A, B)` with scaling numerator `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AdapterRecord", into = "AdapterRecord")]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    alpha: f64,
}

/// Flat on-disk representation of a [`LoraAdapter`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRecord {
    pub d: usize,
    pub k: usize,
    pub r: usize,
    pub alpha: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl TryFrom<AdapterRecord> for LoraAdapter {
    type Error = LoraError;

    fn try_from(rec: AdapterRecord) -> Result<Self, Self::Error> {
        let a = Matrix::new(rec.r, rec.k, rec.a)?;
        let b = Matrix::new(rec.d, rec.r, rec.b)?;
        LoraAdapter::new(a, b, rec.alpha)
    }
}

impl From<LoraAdapter> for AdapterRecord {
    fn from(ad: LoraAdapter) -> Self {
        AdapterRecord {
            d: ad.d(),
            k: ad.k(),
            r: ad.rank(),
            alpha: ad.alpha,
            a: ad.a.into_vec(),
            b: ad.b.into_vec(),
        }
    }
}

impl LoraAdapter {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self, LoraError> {
        let r = a.rows();
        let (d, k) = (b.rows(), a.cols());
        if r == 0 || r > d.min(k) {
            return Err(LoraError::InvalidRank { r, d, k });
        }
        expect_shape("B", &b, (d, r))?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(LoraError::InvalidAlpha(alpha));
        }
        Ok(Self { a, b, alpha })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn d(&self) -> usize {
        self.b.rows()
    }

    pub fn k(&self) -> usize {
        self.a.cols()
    }

    /// `α / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Same adapter with `A` replaced.
    pub fn with_a(&self, a: Matrix) -> Result<Self, LoraError> {
        expect_shape("A", &a, self.a.shape())?;
        Ok(Self {
            a,
            b: self.b.clone(),
            alpha: self.alpha,
        })
    }

    /// Same adapter with `B` replaced.
    pub fn with_b(&self, b: Matrix) -> Result<Self, LoraError> {
        expect_shape("B", &b, self.b.shape())?;
        Ok(Self {
            a: self.a.clone(),
            b,
            alpha: self.alpha,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("adapter record always serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Draws a fresh adapter. Deterministic given the rng state.
pub fn init_adapter<R: Rng + ?Sized>(
    d: usize,
    k: usize,
    r: usize,
    alpha: f64,
    scheme: InitScheme,
    rng: &mut R,
) -> Result<LoraAdapter, LoraError> {
    if r == 0 || r > d.min(k) {
        return Err(LoraError::InvalidRank { r, d, k });
    }
    let std = 1.0 / (r as f64).sqrt();
    let a = standard_normal_sample(rng, r, k).scale(std);
    let b = match scheme {
        InitScheme::ZeroB => Matrix::zeros(d, r),
        InitScheme::BothRandom => standard_normal_sample(rng, d, r).scale(std),
    };
    LoraAdapter::new(a, b, alpha)
}

/// Effective weight delta `(α/r) · B A`.
pub fn delta_weight(adapter: &LoraAdapter) -> Matrix {
    adapter
        .b
        .matmul(&adapter.a)
        .expect("adapter factors are conformable")
        .scale(adapter.scale())
}

fn check_layer(layer: &BackboneLayer, adapter: &LoraAdapter) -> Result<(), LoraError> {
    expect_shape("backbone", &layer.weight, (adapter.d(), adapter.k()))
}

/// `W X + (α/r) B (A X)`, never forming `B A`.
pub fn forward(layer: &BackboneLayer, adapter: &LoraAdapter, x: &Matrix) -> Result<Matrix, LoraError> {
    check_layer(layer, adapter)?;
    expect_shape("input", x, (adapter.k(), x.cols()))?;
    let mut y = layer.weight.matmul(x)?;
    let ax = adapter.a.matmul(x)?;
    let bax = adapter.b.matmul(&ax)?;
    y.axpy(adapter.scale(), &bax)?;
    Ok(y)
}

/// Gradients of a loss with respect to `A` and `B`, given `dL/dY`.
///
/// `dA = s · Bᵀ dY Xᵀ` and `dB = s · dY (A X)ᵀ` with `s = α/r`.
pub fn lora_gradients(
    layer: &BackboneLayer,
    adapter: &LoraAdapter,
    x: &Matrix,
    dy: &Matrix,
) -> Result<(Matrix, Matrix), LoraError> {
    check_layer(layer, adapter)?;
    expect_shape("input", x, (adapter.k(), x.cols()))?;
    expect_shape("output gradient", dy, (adapter.d(), x.cols()))?;
    let s = adapter.scale();
    let bt_dy = adapter.b.t_matmul(dy)?;
    let da = bt_dy.matmul_t(x)?.scale(s);
    let ax = adapter.a.matmul(x)?;
    let db = dy.matmul_t(&ax)?.scale(s);
    Ok((da, db))
}

/// Returns a new layer with `W + delta`; the input layer is untouched.
pub fn merge_into_backbone(layer: &BackboneLayer, delta: &Matrix) -> Result<BackboneLayer, LoraError> {
    expect_shape("merge delta", delta, layer.weight.shape())?;
    delta.ensure_finite("merge delta")?;
    Ok(BackboneLayer {
        weight: layer.weight.add(delta)?,
    })
}
