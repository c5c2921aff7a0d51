//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by the
//! kind of failure so callers (notably the CLI) can map them onto coarse
//! classes: bad input data versus numerical breakdown.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All errors produced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    // ---- data / shape errors -------------------------------------------
    /// A point cloud (or point matrix) had the wrong column count.
    #[error("expected {expected} columns per point, got {got}")]
    BadPointWidth { expected: usize, got: usize },

    /// An operation needed more points than the cloud provides.
    #[error("{op} needs at least {needed} points, cloud has {got}")]
    TooFewPoints {
        op: &'static str,
        needed: usize,
        got: usize,
    },

    /// A count parameter (k, g, m, ...) was outside its valid range.
    #[error("invalid {name}={got}: {reason}")]
    BadCount {
        name: &'static str,
        got: usize,
        reason: &'static str,
    },

    /// A scalar parameter was outside its valid range.
    #[error("invalid {name}={got}: {reason}")]
    BadParam {
        name: &'static str,
        got: f64,
        reason: &'static str,
    },

    /// Normals were supplied with a different row count than the points.
    #[error("normal count {normals} does not match point count {points}")]
    NormalCountMismatch { normals: usize, points: usize },

    /// An operation required normals but the cloud carries none.
    #[error("{op} requires per-point normals")]
    NormalsMissing { op: &'static str },

    /// A dataset (or split of one) was empty where samples are required.
    #[error("empty dataset in {context}")]
    EmptyDataset { context: &'static str },

    /// A supplied normal was not unit length.
    #[error("normal {index} has length {length}, expected 1 within {tol}")]
    NotUnitNormal {
        index: usize,
        length: f64,
        tol: f64,
    },

    /// A coordinate or intermediate value was NaN or infinite.
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    /// Two operands had incompatible dimensions.
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    /// A label was outside the configured class range.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// A dataset sample carried no label where one is required.
    #[error("sample {index} carries no label")]
    UnlabeledSample { index: usize },

    /// The poison split came out empty (or covered the whole set).
    #[error("poison split with rho={rho} over {n} samples yields {selected} samples: {reason}")]
    BadPoisonSplit {
        rho: f64,
        n: usize,
        selected: usize,
        reason: &'static str,
    },

    /// Attack success rate is undefined: no non-target test samples exist.
    #[error("attack success rate undefined: test set contains no samples outside target class {target}")]
    AsrUndefined { target: usize },

    // ---- file / container errors ---------------------------------------
    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A text file (XYZ, config) failed to parse.
    #[error("parse error in {path} line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    /// A binary file did not start with the expected magic bytes.
    #[error("{path}: bad magic, not a {expected} file")]
    BadMagic { path: String, expected: &'static str },

    /// A binary file has an unsupported format version.
    #[error("{path}: unsupported format version {found}, this build supports version {supported}")]
    UnsupportedVersion {
        path: String,
        found: u32,
        supported: u32,
    },

    /// A binary file ended early; `offset` is the byte position of the
    /// truncated read.
    #[error("{path}: truncated at byte offset {offset}")]
    Truncated { path: String, offset: u64 },

    /// The container's declared totals disagree with its payload.
    #[error("{path}: inconsistent container: {reason}")]
    CorruptContainer { path: String, reason: String },

    // ---- numeric errors --------------------------------------------------
    /// The eigensolver was handed a matrix that is not symmetric.
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {delta} exceeds {tol}")]
    AsymmetricMatrix {
        i: usize,
        j: usize,
        delta: f64,
        tol: f64,
    },

    /// Jacobi sweeps did not reach the off-diagonal tolerance.
    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal norm {off})")]
    EigenNoConvergence { sweeps: usize, off: f64 },

    /// Normalization of a degenerate (zero-extent) cloud was requested.
    #[error("cannot normalize: cloud has zero spatial extent")]
    ZeroExtent,
}

impl Error {
    /// Coarse classification used by front ends to pick exit codes:
    /// `true` for numerical failures, `false` for data/usage problems.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::AsymmetricMatrix { .. }
                | Error::EigenNoConvergence { .. }
        )
    }
}
