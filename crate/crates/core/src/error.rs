use thiserror::Error;

/// Errors raised by the model, oracle, simulator and learner.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    Dimension {
        field: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("series diverges: ||H_P|| * ||F|| = {product:.6} >= 1")]
    DivergentSeries { product: f64 },

    #[error("contraction assumption violated: T_P = {t_p:.6} >= 1")]
    AssumptionViolated { t_p: f64 },

    #[error("mean-field matrix outside the admissible ball: ||F|| = {norm:.6} > {radius:.6}")]
    NotAdmissible { norm: f64, radius: f64 },

    #[error("trajectory exceeds its declared bound at t = {t}: {norm:.3e} > {bound:.3e}")]
    UnboundedTrajectory { t: usize, norm: f64, bound: f64 },

    #[error("closed loop is not stable (spectral radius {spectral_radius:.6})")]
    Unstable { spectral_radius: f64 },

    #[error("trajectory diverged at step {step}")]
    Diverged { step: usize },

    #[error("not enough data: {steps} steps, at least {required} required")]
    InsufficientData { steps: usize, required: usize },

    #[error("least-squares system is rank deficient (smallest singular value {smallest_singular_value:.3e})")]
    RankDeficient { smallest_singular_value: f64 },

    #[error("actor update rejected: control block of the critic estimate is not positive definite")]
    SafeguardRejected,

    #[error("inner loop aborted at iteration {iteration} after {rejections} consecutive rejected updates")]
    InnerLoopAborted { iteration: usize, rejections: usize },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("mean-field matrix diverged in round {round}: ||F|| = {norm:.6} > 1")]
    MeanFieldDiverged { round: usize, norm: f64 },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Dimension { .. }
            | Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::AssumptionViolated { .. }
            | Error::NotAdmissible { .. } => false,
            Error::Round { source, .. } => source.is_numerical(),
            _ => true,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
