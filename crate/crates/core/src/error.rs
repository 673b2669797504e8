use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid level ({what})")]
    InvalidLevel { what: String },

    #[error("detuning {detuning:.4e} rad/s lies within {floor} linewidths of the {line} f'={f_prime} line")]
    NearResonance {
        line: String,
        f_prime: f64,
        detuning: f64,
        floor: f64,
    },

    #[error("tensor light shifts have the same sign on both colors; no power ratio cancels them")]
    Uncancellable,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("numerical instability at t = {time:.3e} s: {reason}")]
    Instability { time: f64, reason: String },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("stage {stage}: {source}")]
    Stage { stage: String, source: Box<Error> },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Wrap with the name of the pipeline stage that failed.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }

    /// The innermost error, past any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
