use thiserror::Error;

/// Errors raised by the modeling, simulation and planning pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("base pitch {pitch} rad is inside the gimbal guard band")]
    GimbalGuard { pitch: f64 },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("degenerate link cloud: {0}")]
    DegenerateFrame(String),

    #[error("integration produced a non-finite state at t = {t}")]
    Integration { t: f64 },

    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("unknown gait preset `{0}`")]
    UnknownPreset(String),

    #[error("corridor has no segments")]
    EmptyCorridor,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl Error {
    /// Coarse failure class, used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Validation { .. } | Error::UnknownPreset(_) | Error::EmptyCorridor | Error::Dimension { .. } => {
                "validation"
            }
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            _ => "runtime",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "validation" => 2,
            "parse" => 3,
            "io" => 4,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
