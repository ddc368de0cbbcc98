use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite linear predictor")]
    NonFiniteLinearPredictor,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cannot estimate N")]
    CannotEstimateN,
    #[error("negative penalty level {0}")]
    NegativeLambda(f64),
    #[error("invalid penalty configuration: {0}")]
    InvalidPenalty(String),
    #[error("record {index}: {what}")]
    MissingField { index: usize, what: &'static str },
    #[error("no units in sample {0}")]
    EmptySample(&'static str),
    #[error("singular LQA system")]
    SingularLqa,
    #[error("singular sandwich bread matrix (condition number estimate {cond:.3e})")]
    SingularSandwich { cond: f64 },
    #[error("degenerate fold; reduce folds or enlarge data")]
    DegenerateFold,
    #[error("invalid joint probabilities")]
    InvalidJointProbabilities,
    #[error("estimator {kind} unavailable: {reason}")]
    Unavailable { kind: String, reason: String },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Process exit status: 2 configuration, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::NegativeLambda(_) | Error::InvalidPenalty(_) => 2,
            Error::DimensionMismatch { .. }
            | Error::CannotEstimateN
            | Error::MissingField { .. }
            | Error::EmptySample(_)
            | Error::Unavailable { .. }
            | Error::InvalidData(_)
            | Error::Io(_) => 3,
            Error::NonFiniteLinearPredictor
            | Error::SingularLqa
            | Error::SingularSandwich { .. }
            | Error::DegenerateFold
            | Error::InvalidJointProbabilities
            | Error::Numerical(_) => 4,
        }
    }
}
