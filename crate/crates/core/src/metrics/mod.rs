//! Spectrum analytics, trajectory PCA and report export.

mod export;
mod spectrum;
mod trajectory;

pub use export::{
    export_reports, format_float, read_csv, read_loss_curve, CommRow, ExportBundle, LossRow, MethodRun, COMM_COST,
    LANDSCAPE_GRID, LOSS_CURVE, RESIDUAL_RANK, RUN_CONFIG, SPECTRA, TRAJECTORY,
};
pub use spectrum::{effective_rank, residual_rank_stats, ResidualRankRow, SpectrumLog};
pub use trajectory::{landscape_grid, trajectory_pca, GridCell, GridSpec, TrajectoryInput, TrajectoryPca, TrajectoryPoint};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::linalg::LinalgError;

/// Recorded in run metadata so readers know which definition produced
/// the effective-rank numbers.
pub const EFFECTIVE_RANK_FORMULA: &str = "exp(-sum_i p_i ln p_i), p_i = sigma_i / sum_j sigma_j";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("spectrum is all zero")]
    ZeroSpectrum,
    #[error("spectrum entry {index} is negative or not finite")]
    InvalidSpectrum { index: usize },
    #[error("round {0} has no spectrum logs")]
    EmptyRound(usize),
    #[error("trajectory PCA needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("trajectory shape {got:?} differs from {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl MetricsError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn csv(path: &Path, source: csv::Error) -> Self {
        Self::Csv {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}
