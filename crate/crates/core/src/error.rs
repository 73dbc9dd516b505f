use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: model has d = {expected}, point has {found} coordinates")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("a bond needs two distinct endpoints")]
    DegenerateBond,

    #[error("site is not in the cluster")]
    SiteNotInCluster,

    #[error("sites are not connected in the cluster")]
    Disconnected,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no samples in size bin n = {0}")]
    EmptyBin(usize),

    #[error("accumulator holds no samples")]
    EmptyAccumulator,

    #[error("sequence lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("quadrature did not converge: estimate {estimate:e}, error {error:e} after {subdivisions} subdivisions")]
    QuadratureNotConverged {
        estimate: f64,
        error: f64,
        subdivisions: usize,
    },

    #[error("contour sum is not resolved: {0}")]
    ContourUnresolved(String),

    #[error("enumeration domain too large: {0}")]
    DomainTooLarge(String),

    #[error("point lies outside the enumeration domain")]
    OutOfDomain,

    #[error("budget exhausted: {0}")]
    BudgetExhausted(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
