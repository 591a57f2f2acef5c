use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("negative tendon tension {value} at index {index}")]
    NegativeTension { index: usize, value: f64 },

    #[error("degenerate tendon tangent at node {node}")]
    DegenerateTangent { node: usize },

    #[error("shooting did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("numerical blow-up at t = {time}")]
    NumericalBlowup { time: f64 },

    #[error("time {t} outside schedule range [0, {end})")]
    TimeOutOfRange { t: f64, end: f64 },

    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("frame {segment} is not a rotation (orthonormality error {error:e})")]
    NonOrthonormalFrame { segment: usize, error: f64 },

    #[error("empty history")]
    EmptyHistory,

    #[error("lasso did not converge after {iterations} iterations (duality gap {gap:e})")]
    LassoNonConvergence { iterations: usize, gap: f64 },

    #[error("quadratic cost is not positive semidefinite")]
    NotPositiveSemidefinite,

    #[error("infeasible bounds: {0}")]
    InfeasibleBounds(String),

    #[error("config hash mismatch: {expected} vs {found}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("missing model variant: {0}")]
    MissingVariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::InvalidConfig(_) => "invalid_config",
            Self::InvalidArgument(_) => "invalid_argument",
            Self::DimensionMismatch { .. } => "dimension_mismatch",
            Self::NegativeTension { .. } => "negative_tension",
            Self::DegenerateTangent { .. } => "degenerate_tangent",
            Self::NonConvergence { .. } => "non_convergence",
            Self::NumericalBlowup { .. } => "numerical_blowup",
            Self::TimeOutOfRange { .. } => "time_out_of_range",
            Self::Trajectory { source, .. } => source.kind(),
            Self::NonOrthonormalFrame { .. } => "non_orthonormal_frame",
            Self::EmptyHistory => "empty_history",
            Self::LassoNonConvergence { .. } => "lasso_non_convergence",
            Self::NotPositiveSemidefinite => "not_positive_semidefinite",
            Self::InfeasibleBounds(_) => "infeasible_bounds",
            Self::ConfigHashMismatch { .. } => "config_hash_mismatch",
            Self::VersionMismatch { .. } => "version_mismatch",
            Self::Corrupt(_) => "corrupt",
            Self::MissingVariant(_) => "missing_variant",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
            Self::Toml(_) => "toml",
        }
    }
}
