use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rotation angle {angle} is too close to pi for a unique logarithm")]
    AngleNearPi { angle: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("scatter spectrum is degenerate (eigenvalue gap {gap:e} below floor {floor:e})")]
    DegenerateSpectrum { gap: f64, floor: f64 },
    #[error("no IMU samples cover the requested interval")]
    EmptyImuSpan,
    #[error("timestamp {t} lies outside the covered span [{start}, {end}]")]
    TimestampOutOfSpan { t: f64, start: f64, end: f64 },
    #[error("information matrix is not invertible")]
    SingularInformationMatrix,
    #[error("scan produced no valid point-to-plane matches")]
    NoValidMatches,
    #[error("estimated and reference series are not aligned: {0}")]
    MisalignedSeries(String),
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("IMU gap of {gap} s at t={t} exceeds two sample periods")]
    TimestampGap { t: f64, gap: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
