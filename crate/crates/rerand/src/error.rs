use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("covariate covariance matrix is singular; offending columns: {columns:?}")]
    SingularCovariance { columns: Vec<String> },

    #[error("singular prefix covariance while orthogonalizing tier {tier}")]
    SingularTier { tier: usize },

    #[error("degenerate population: V_tau_tau = 0 (constant potential outcomes)")]
    DegeneratePopulation,

    #[error(
        "rerandomization budget exhausted after {draws} draws \
         (observed acceptance rate {observed_acceptance:.3e}); \
         the balance threshold may be too strict for this sample size"
    )]
    BudgetExhausted {
        draws: u64,
        observed_acceptance: f64,
    },

    #[error("instance too large: C({n}, {n1}) = {count:.3e} exceeds the enumeration guard of {guard:.1e}")]
    InstanceTooLarge {
        n: usize,
        n1: usize,
        count: f64,
        guard: f64,
    },

    #[error("balance predicate rejected at registration: {0}")]
    PredicateRejected(String),

    #[error("balance predicate failed during evaluation: {0}")]
    PredicateFailed(String),

    #[error(
        "acceptance starvation: only {accepted} accepted draws in {attempted} attempts \
         (need at least {needed})"
    )]
    AcceptanceStarvation {
        accepted: u64,
        attempted: u64,
        needed: u64,
    },

    #[error("treatment arm too small: need at least {needed} units per arm, got n1={n1}, n0={n0}")]
    ArmTooSmall { n1: usize, n0: usize, needed: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
