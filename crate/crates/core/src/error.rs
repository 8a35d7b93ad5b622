use thiserror::Error;

pub type Result<T> = std::result::Result<T, BlochError>;

#[derive(Debug, Error)]
pub enum BlochError {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("flux not admissible: B0*|E|/(4*pi) = {ratio} is not an integer")]
    FluxNotAdmissible { ratio: f64 },

    #[error("eigensolver failure: {0}")]
    EigensolverFailure(String),

    #[error("operation not applicable: {0}")]
    NotApplicable(String),

    #[error("isolated-band assumption violated: minimal gap {margin:.3e} below {threshold:.3e}")]
    AssumptionAViolated { margin: f64, threshold: f64 },

    #[error("no smooth periodic gauge exists: Chern number {chern}")]
    AssumptionBViolated { chern: i64 },

    #[error("gap too small at k = {k:?}: {gap:.3e} < {threshold:.3e}")]
    GapTooSmall {
        k: [f64; 2],
        gap: f64,
        threshold: f64,
    },

    #[error(
        "h1 routes disagree at y = {y:?}, k = {k:?}: inner-product {inner} vs explicit {explicit}"
    )]
    RouteMismatch {
        y: [f64; 2],
        k: [f64; 2],
        inner: num_complex::Complex64,
        explicit: num_complex::Complex64,
    },

    #[error("right-hand side not orthogonal to the band vector: overlap {overlap:.3e}")]
    NonOrthogonalRhs { overlap: f64 },

    #[error("singular reduced-resolvent solve: {0}")]
    SingularSolve(String),

    #[error("aliasing: |k|max = {k_max:.3} exceeds what the cell grid resolves ({limit:.3})")]
    AliasWarning { k_max: f64, limit: f64 },

    #[error("grid resolution: {0}")]
    GridResolution(String),

    #[error("integrator step failure at s = {s}: {reason}")]
    StepFailure { s: f64, reason: String },

    #[error("caustic reached at s = {s}: |det J| = {det:.3e}")]
    CausticReached { s: f64, det: f64 },

    #[error("time step too large: dt * E_max = {dt_emax:.3} > 0.1")]
    CflViolation { dt_emax: f64 },

    #[error("direct solver diverged: {0}")]
    SolverDivergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl BlochError {
    pub fn validation(field: &str, reason: impl Into<String>) -> Self {
        BlochError::Validation {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Bad input (parse, validation, admissibility, files) as opposed to a
    /// numerical failure.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            BlochError::Parse(_) | BlochError::Validation { .. } | BlochError::FluxNotAdmissible { .. } | BlochError::Io(_)
        )
    }
}

impl From<csv::Error> for BlochError {
    fn from(e: csv::Error) -> Self {
        BlochError::Io(std::io::Error::other(e.to_string()))
    }
}

impl From<serde_json::Error> for BlochError {
    fn from(e: serde_json::Error) -> Self {
        BlochError::Parse(e.to_string())
    }
}
