//! Crate-wide error type.

use std::fmt;

/// Errors produced by group operations, filters, and the experiment harness.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A vector or matrix had the wrong dimensions for the requested group.
    DimensionMismatch { expected: usize, got: usize },
    /// A matrix does not satisfy the membership invariants of the group
    /// (orthonormality, unit bottom row, translation pattern) within
    /// tolerance. `defect` is the measured violation.
    NotInGroup { defect: f64 },
    /// A matrix passed to `vee` does not have the algebra pattern of the
    /// group (skew-symmetry, zero bottom row) within tolerance.
    NotInAlgebra { defect: f64 },
    /// The principal logarithm is not reliably defined: the rotation angle is
    /// within `1e-6` of the branch cut at pi.
    LogBranchCut { angle: f64 },
    /// A covariance matrix is not symmetric positive semi-definite.
    NotPositiveSemiDefinite { min_eigenvalue: f64 },
    /// The innovation covariance could not be factorised; the filter update
    /// cannot proceed.
    SingularInnovation,
    /// A gain function does not map the noise-free identity output to the
    /// group identity. `defect` is the distance from the identity.
    GainNotNeutralAtReference { defect: f64 },
    /// A gain parameter is outside its admissible range.
    InvalidGain(String),
    /// A gain schedule was applied to a scenario other than the one it was
    /// tuned for.
    FingerprintMismatch { expected: u64, got: u64 },
    /// A schedule or report file could not be parsed.
    Format(String),
    /// An iterative computation did not converge within its budget.
    NotConverged(String),
    /// A scenario or experiment configuration is invalid.
    Config(String),
    /// Grid search over an empty grid.
    EmptyGrid,
    /// File I/O failed. Carries the rendered `std::io::Error`.
    Io(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            Error::NotInGroup { defect } => {
                write!(f, "matrix is not a group element (defect {defect:.3e})")
            }
            Error::NotInAlgebra { defect } => {
                write!(f, "matrix does not have the algebra pattern (defect {defect:.3e})")
            }
            Error::LogBranchCut { angle } => {
                write!(f, "rotation angle {angle:.9} is too close to the branch cut at pi")
            }
            Error::NotPositiveSemiDefinite { min_eigenvalue } => {
                write!(f, "matrix is not PSD (min eigenvalue {min_eigenvalue:.3e})")
            }
            Error::SingularInnovation => {
                write!(f, "innovation covariance is singular")
            }
            Error::GainNotNeutralAtReference { defect } => {
                write!(
                    f,
                    "gain function does not return the identity at the reference output \
                     (defect {defect:.3e})"
                )
            }
            Error::InvalidGain(msg) => write!(f, "invalid gain parameter: {msg}"),
            Error::FingerprintMismatch { expected, got } => {
                write!(
                    f,
                    "gain schedule fingerprint {got:#018x} does not match scenario {expected:#018x}"
                )
            }
            Error::Format(msg) => write!(f, "malformed file: {msg}"),
            Error::NotConverged(msg) => write!(f, "did not converge: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::EmptyGrid => write!(f, "grid search requires a non-empty grid"),
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
