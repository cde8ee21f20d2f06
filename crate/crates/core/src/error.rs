use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at layer {layer}: expected {expected}, got {got}")]
    Dimension {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("affine map at layer {layer} is not invertible ({reason})")]
    NotInvertible { layer: usize, reason: String },

    #[error("activation `{0}` is not strictly increasing and cannot be inverted")]
    NonMonotoneActivation(String),

    #[error("unknown custom activation `{0}`")]
    UnknownActivation(String),

    #[error("samples are not strictly increasing near x = {at}")]
    NonMonotone { at: f64 },

    #[error("tolerance {tol:e} not reached: best error {best:e} ({context})")]
    Budget { tol: f64, best: f64, context: String },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn at_stage(self, stage: usize) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}
