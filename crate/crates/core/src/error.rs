use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("non-finite matrix entry")]
    NonFinite,

    #[error("channel count mismatch: nominal has {nominal}, perturbation has {perturbation}")]
    ChannelCountMismatch { nominal: usize, perturbation: usize },

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("state repair out of budget (hermiticity residual {herm_residual:.3e}, trace error {trace_error:.3e}){}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    RepairOutOfBudget {
        herm_residual: f64,
        trace_error: f64,
        step: Option<usize>,
    },

    #[error("map is not linear: probe residual {0:.3e}")]
    NonLinearityDetected(f64),

    #[error("target subspace is not invariant: {0}")]
    NotInvariant(String),

    #[error("rank decision ambiguous: singular value {value:.3e} inside guard band around {tol:.1e}")]
    RankAmbiguous { value: f64, tol: f64 },

    #[error("eigensolver failed to converge")]
    EigenSolverFailure,

    #[error("generator is not stable enough: spectral abscissa {lambda:.3e}, epsilon {epsilon:.3e}")]
    NotStable { lambda: f64, epsilon: f64 },

    #[error("shifted linear system is numerically singular")]
    SingularSystem,

    #[error("synthesized certificate failed verification: {0}")]
    CertificateInvalid(String),

    #[error("condition AR violated: {0}")]
    ConditionARViolated(String),

    #[error("assumption A1 violated for channel {channel}")]
    A1Violated { channel: usize },

    #[error("Re l_{{k,0}} vanishes for channel {channel}")]
    ZeroL0 { channel: usize },

    #[error("filter state lost strict positivity at step {step} (min eigenvalue {min_eig:.3e})")]
    FilterSingular { step: usize, min_eig: f64 },

    #[error("unsupported perturbation: {0}")]
    UnsupportedPerturbation(String),

    #[error("hypothesis unmet: {0}")]
    HypothesisUnmet(String),

    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),

    #[error("fit window degenerate: {usable} usable points")]
    WindowDegenerate { usable: usize },

    #[error("trajectory {index}: {source}")]
    Trajectory { index: usize, source: Box<Error> },

    #[error("sample {x:?}: {source}")]
    Sample { x: Vec<f64>, source: Box<Error> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error in `{field}`: {reason}")]
    ParseError { field: String, reason: String },

    #[error("validation error in `{field}`: {constraint}")]
    ValidationError { field: String, constraint: String },

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
