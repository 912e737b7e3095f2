use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum IsoflowError {
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error(
        "spectrum is not strongly disjoint: subsets {left:?} and {right:?} share the mean {mean}"
    )]
    NotStronglyDisjoint {
        left: Vec<f64>,
        right: Vec<f64>,
        mean: f64,
    },

    #[error("enumeration for n = {n} exceeds the configured cap of {cap}")]
    CapExceeded { n: usize, cap: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("matrix is not an equilibrium (commutator norm {0:e})")]
    NotEquilibrium(f64),

    #[error("ambiguous terminal match: {0}")]
    AmbiguousMatch(String),

    #[error("constant-diagonal construction stalled: {0}")]
    ConstructionStalled(String),

    #[error("rank-deficient diagonal-block solve (rank {rank}, expected {expected})")]
    RankDeficient { rank: usize, expected: usize },

    #[error("degenerate Hessian eigenvalue {0:e} on the normal space")]
    Degenerate(f64),

    #[error("permutations {0} and {1} are not related by a simple transposition")]
    NotAdjacent(String, String),

    #[error("expected a co-index 1 saddle, found co-index {0}")]
    NotCoindexOne(usize),

    #[error("unstable manifold trace ended at a non-stable point: {0}")]
    UnstableEndpoint(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("infeasible horizon: best terminal error {terminal_error:e}")]
    InfeasibleHorizon { terminal_error: f64, energy: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IsoflowError>;
