use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("outcome {value} at row {row} lies outside [0, 1]")]
    OutcomeOutOfRange { row: usize, value: f64 },

    #[error("treatment value {value} at row {row} is not 0 or 1")]
    InvalidTreatment { row: usize, value: f64 },

    #[error("treatment arm {arm} has no units")]
    EmptyArm { arm: u8 },

    #[error("covariate row {row} has l2 norm {norm} > 1")]
    NormViolation { row: usize, norm: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("estimand {0} has no closed-form score")]
    UnsupportedEstimand(String),

    #[error("second-moment matrix is singular (smallest eigenvalue {min_eigenvalue:e})")]
    SingularMoment { min_eigenvalue: f64 },

    #[error("solver stopped after {iterations} iterations with mean gradient norm {grad_norm:e}")]
    DidNotConverge {
        theta: Vec<f64>,
        grad_norm: f64,
        iterations: usize,
    },

    #[error("data appear separable: coefficient norm reached {theta_norm:e}")]
    SeparableData { theta: Vec<f64>, theta_norm: f64 },

    #[error("score for alpha={alpha}, beta={beta} is not strongly convex; exact K-norm sampling is unavailable")]
    NotStronglyConvex { alpha: f64, beta: f64 },

    #[error("rejection sampler exceeded {max_proposals} proposals")]
    MaxProposalsExceeded { max_proposals: usize },

    #[error("envelope violated: log acceptance ratio {log_ratio:e} > 0")]
    EnvelopeViolation { log_ratio: f64 },

    #[error("target density is not integrable: {0}")]
    ImproperTarget(String),

    #[error("privacy budget exceeded: spending {requested} on '{label}' with {remaining} remaining")]
    BudgetExceeded {
        label: String,
        requested: f64,
        remaining: f64,
    },

    #[error("variance must be positive, got {0}")]
    NonpositiveVariance(f64),
}
