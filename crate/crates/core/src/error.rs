use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value produced by `{op}`")]
    NumericFailure { op: &'static str },

    #[error("non-finite gradient in parameter segment `{segment}`")]
    NonFiniteGradient { segment: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("discrete-gradient solve did not converge after {iters} iterations (residuals {history:?})")]
    DgNotConverged { iters: usize, history: Vec<f64> },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("rejection sampling exceeded {0} draws")]
    SamplingExhausted(usize),

    #[error("dissipation law has no active region (z'(w) >= 0 everywhere)")]
    EmptyActiveRegion,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("cannot aggregate an empty group")]
    EmptyGroup,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
