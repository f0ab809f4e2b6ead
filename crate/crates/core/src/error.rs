use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("non-manifold edge ({0}, {1}) is shared by more than two faces")]
    NonManifold(usize, usize),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("geodesic shooting diverged at step {step}; try smaller momenta or more steps")]
    ShootingDiverged { step: usize },

    #[error("flow integration produced a non-finite state")]
    FlowDiverged,

    #[error("singular linear system ({0}); try a larger regularisation weight")]
    SingularSystem(String),

    #[error("rank-deficient covariance in the {block} block; reduce the number of components")]
    RankDeficient { block: &'static str },
}

pub type Result<T> = std::result::Result<T, Error>;
