use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// Every profile received zero posterior mass.
    #[error("degenerate likelihood: {0}")]
    DegenerateLikelihood(String),

    /// An internal numerical invariant was violated (EM likelihood decrease,
    /// non-finite MCMC state, ...).
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("{step}: {source}")]
    Step {
        step: String,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    /// Wraps an error with the name of the procedure step that produced it.
    pub fn in_step(self, step: impl Into<String>) -> Self {
        Error::Step {
            step: step.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by user configuration or malformed input rather
    /// than by a failed computation.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Parse(_) | Error::Io(_) => true,
            Error::Step { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
