use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A physical parameter is outside its admissible range.
    #[error("domain error: {0}")]
    Domain(String),

    /// A structural problem with the inputs (lengths, ordering, emptiness).
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("no detectable peak (height {height:.3e} vs noise {noise:.3e})")]
    NoPeak { height: f64, noise: f64 },

    #[error("visibility {contrast:.3e} is below the noise level {noise:.3e}")]
    LowContrast { contrast: f64, noise: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
