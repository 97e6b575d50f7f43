use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("division by zero: level used as divisor is zero at {0}")]
    DivisionByZero(NaiveDate),
    #[error("series too short: need at least {needed} observations, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("dates must be strictly increasing in series `{0}`")]
    UnorderedDates(String),
    #[error("inner alignment leaves fewer than 2 common dates")]
    EmptyIntersection,
    #[error("insufficient history: needed {needed} rows, {available} available")]
    InsufficientHistory { needed: usize, available: usize },
    #[error("date {0} not present in panel")]
    DateNotFound(NaiveDate),
    #[error("missing value for `{name}` at {date} inside requested window")]
    MissingData { name: String, date: NaiveDate },
    #[error("unknown series `{0}`")]
    UnknownSeries(String),
    #[error("series `{0}` has zero variance")]
    DegenerateSeries(String),
    #[error("no candidate passed the selection thresholds")]
    EmptySelection,
    #[error("regression design matrix is singular beyond ridge repair")]
    SingularDesign,
    #[error("dynamic-programming table too large: {cells} cells (limit 1e6)")]
    TableTooLarge { cells: usize },
    #[error("implied covariance is not positive definite after shrinkage")]
    SingularCovariance,
    #[error("regression is rank deficient")]
    RankDeficient,
    #[error("training diverged (non-finite loss) for network {spec}")]
    NonFiniteLoss { spec: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("eigendecomposition did not converge")]
    EigenFailure,
    #[error("asset `{0}` has zero variance")]
    ZeroVariance(String),
    #[error("matrix is singular; regularize or use pseudoinverse mode")]
    SingularMatrix,
    #[error("infeasible bounds: {0}")]
    Infeasible(String),
    #[error("correlation matrix is not positive semi-definite after repair")]
    NonPsdCorrelation,
    #[error("quadratic form is negative; driver covariance is not PSD")]
    NegativeQuadraticForm,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("solver hit its iteration limit ({0})")]
    IterationLimit(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error in {path}: {reason}")]
    Csv { path: String, reason: String },
}

impl Error {
    /// Stable machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DivisionByZero(_) => "DivisionByZero",
            Error::TooShort { .. } => "TooShort",
            Error::UnorderedDates(_) => "UnorderedDates",
            Error::EmptyIntersection => "EmptyIntersection",
            Error::InsufficientHistory { .. } => "InsufficientHistory",
            Error::DateNotFound(_) => "DateNotFound",
            Error::MissingData { .. } => "MissingData",
            Error::UnknownSeries(_) => "UnknownSeries",
            Error::DegenerateSeries(_) => "DegenerateSeries",
            Error::EmptySelection => "EmptySelection",
            Error::SingularDesign => "SingularDesign",
            Error::TableTooLarge { .. } => "TableTooLarge",
            Error::SingularCovariance => "SingularCovariance",
            Error::RankDeficient => "RankDeficient",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::EigenFailure => "EigenFailure",
            Error::ZeroVariance(_) => "ZeroVariance",
            Error::SingularMatrix => "SingularMatrix",
            Error::Infeasible(_) => "Infeasible",
            Error::NonPsdCorrelation => "NonPsdCorrelation",
            Error::NegativeQuadraticForm => "NegativeQuadraticForm",
            Error::Unbounded => "Unbounded",
            Error::IterationLimit(_) => "IterationLimit",
            Error::InvalidInput(_) => "InvalidInput",
            Error::Io { .. } => "Io",
            Error::Csv { .. } => "Csv",
        }
    }
}
