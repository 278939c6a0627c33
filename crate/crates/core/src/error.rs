use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("domain error in field `{label}`: coordinate {coord} = {value}")]
    Domain {
        label: String,
        coord: usize,
        value: f64,
    },

    #[error("flow of field `{label}` diverged (non-finite state)")]
    FlowDivergence { label: String },

    #[error("scheme error at node {node}: {reason}")]
    Scheme { node: usize, reason: String },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid patch: {0}")]
    InvalidPatch(String),

    #[error("degenerate patch: {0}")]
    DegeneratePatch(String),

    #[error("degenerate direction: all points coincide")]
    DegenerateDirection,

    #[error("invalid step context: {0}")]
    InvalidContext(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("reduction failed: moment drift {drift:e} exceeds tolerance")]
    ReductionFailed { drift: f64 },

    #[error("positivity violated: coordinate {coord} = {value}")]
    Positivity { coord: usize, value: f64 },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("patch {patch}: {source}")]
    InPatch {
        patch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn in_patch(self, patch: usize) -> Self {
        Error::InPatch {
            patch,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// Whether the failure is a configuration problem (exit code 2) rather
    /// than a numeric one (exit code 3).
    pub fn is_config(&self) -> bool {
        match self {
            Error::InvalidModel(_)
            | Error::InvalidParams(_)
            | Error::InvalidPartition(_)
            | Error::InvalidContext(_)
            | Error::Config(_)
            | Error::Io(_) => true,
            Error::AtStep { source, .. } | Error::InPatch { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
