//! Crate-wide error type. One enum keeps match arms exhaustive at call
//! sites; variants carry the numbers needed to diagnose a failure.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Pitch magnitude at or beyond the Euler-rate singularity guard.
    SingularOrientation { pitch: f64 },
    /// A state component left the sane range; the trajectory has blown up.
    Diverged { magnitude: f64 },
    /// NaN or infinity where a finite number is required.
    NonFinite { context: &'static str },
    /// Matrix or vector dimensions do not line up.
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// Gram matrix is numerically rank-deficient and no ridge term was requested.
    RankDeficient { condition: f64 },
    /// Fewer snapshots than unknowns in an unregularized fit.
    InsufficientData { samples: usize, needed: usize },
    /// A sampler produced a state outside the valid region.
    InvalidSample { detail: String },
    /// Hessian has negative curvature beyond tolerance; the QP is not convex.
    NonConvex,
    /// IK target outside the reachable annulus of the leg.
    OutOfWorkspace { radius: f64 },
    /// Constraint set is structurally empty (for example crossed bounds).
    Infeasible { detail: String },
    /// MPC constraint set came back empty; solver certified infeasibility.
    InfeasibleMpc { residual: f64 },
    /// Bad configuration value.
    InvalidConfig { detail: String },
    /// Malformed or mismatched serialized artifact (model, dataset, log).
    BadArtifact { detail: String },
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::SingularOrientation { pitch } => {
                write!(f, "pitch {pitch:.6} rad is inside the Euler singularity guard")
            }
            Error::Diverged { magnitude } => {
                write!(f, "state magnitude {magnitude:.3e} exceeds the divergence limit")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::DimensionMismatch {
                context,
                expected,
                got,
            } => write!(f, "dimension mismatch in {context}: expected {expected}, got {got}"),
            Error::RankDeficient { condition } => write!(
                f,
                "Gram matrix condition {condition:.3e} exceeds 1e12 with zero regularization"
            ),
            Error::InsufficientData { samples, needed } => write!(
                f,
                "{samples} snapshots cannot determine {needed} unknowns without regularization"
            ),
            Error::InvalidSample { detail } => write!(f, "sampler produced invalid state: {detail}"),
            Error::NonConvex => write!(f, "Hessian is not positive semidefinite"),
            Error::OutOfWorkspace { radius } => {
                write!(f, "IK target radius {radius:.4} m is outside the leg workspace")
            }
            Error::Infeasible { detail } => write!(f, "infeasible constraints: {detail}"),
            Error::InfeasibleMpc { residual } => {
                write!(f, "MPC quadratic program infeasible (residual {residual:.3e})")
            }
            Error::InvalidConfig { detail } => write!(f, "invalid configuration: {detail}"),
            Error::BadArtifact { detail } => write!(f, "bad artifact: {detail}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
