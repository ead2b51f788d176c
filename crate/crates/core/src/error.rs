use alloc::string::String;

/// Errors produced by the core library.
///
/// Variants are grouped by the category the CLI maps to an exit code
/// (see [`Error::category`]).
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid landmark: {0}")]
    InvalidLandmark(String),
    #[error("extent mismatch: {0}")]
    ExtentMismatch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("state error: {0}")]
    State(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("region error: {0}")]
    Region(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error("training failure: {0}")]
    TrainingFailure(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("calibration error: {0}")]
    Calibration(String),
}

/// Coarse error category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Compatibility,
    Numerical,
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::InvalidParameter(_)
            | Error::Config(_)
            | Error::Spec(_)
            | Error::Schedule(_) => Category::Config,
            Error::InvalidLandmark(_)
            | Error::ExtentMismatch(_)
            | Error::Shape(_)
            | Error::Data(_)
            | Error::State(_)
            | Error::Region(_)
            | Error::Size(_) => Category::Data,
            Error::Compatibility(_) => Category::Compatibility,
            Error::TrainingFailure(_) | Error::Numerical(_) | Error::Calibration(_) => {
                Category::Numerical
            }
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
