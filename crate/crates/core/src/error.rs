//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by mesh construction, assembly, training and persistence.
///
/// Nonlinear solver non-convergence is deliberately *not* an error: diverged
/// solves are ordinary outcomes consumed by the robustness tables, so they
/// are reported through [`crate::fem::SolveStatus`] instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh specification: {0}")]
    InvalidMesh(String),

    #[error("periodic pairing failed: {0}")]
    GeometricMismatch(String),

    #[error("invalid material: {0}")]
    InvalidMaterial(String),

    #[error("Poisson ratio {nu} is at or beyond the incompressible limit 0.5")]
    IncompressibleLimit { nu: f64 },

    #[error("element {element} inverted at Gauss point {gauss} (det F = {det_f:.3e})")]
    InvertedElement {
        element: usize,
        gauss: usize,
        det_f: f64,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient rank: {0}")]
    InsufficientRank(String),

    #[error("empty cluster after {retries} re-seeding attempts")]
    EmptyCluster { retries: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("load path sampling exceeded {attempts} attempts without det F > 0")]
    PathSampling { attempts: usize },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("matrix block truncated: {path} ({detail})")]
    BlockTruncated { path: String, detail: String },

    #[error("matrix block magic mismatch in {path}")]
    BadMagic { path: String },

    #[error("unsupported block layout in {path}: {detail}")]
    BadBlockLayout { path: String, detail: String },

    #[error("content hash mismatch for {path}: manifest {expected}, file {actual}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
