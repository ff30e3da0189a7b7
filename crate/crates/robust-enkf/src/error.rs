use std::fmt;

/// Error type shared by models, filters, and the benchmark harness.
#[derive(Debug)]
pub enum Error {
    /// Mismatched or invalid matrix/vector dimensions.
    Dimension(String),
    /// A scalar argument lies outside its mathematical domain.
    Domain(String),
    /// A matrix required to be symmetric positive definite failed its
    /// factorization; the message names the offending matrix.
    NotPositiveDefinite(String),
    /// A computation produced NaN or infinite values.
    NonFinite(String),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// Failure while processing a single filter step.
    AtStep { step: usize, source: Box<Error> },
    /// Failure inside a Monte Carlo run.
    AtRun { run: usize, source: Box<Error> },
    /// Output files could not be written.
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::NotPositiveDefinite(msg) => write!(f, "not positive definite: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::AtStep { step, source } => write!(f, "step {step}: {source}"),
            Error::AtRun { run, source } => write!(f, "run {run}: {source}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::AtStep { source, .. } | Error::AtRun { source, .. } => Some(source),
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl Error {
    pub(crate) fn at_step(step: usize) -> impl FnOnce(Error) -> Error {
        move |source| Error::AtStep {
            step,
            source: Box::new(source),
        }
    }

    pub(crate) fn at_run(run: usize) -> impl FnOnce(Error) -> Error {
        move |source| Error::AtRun {
            run,
            source: Box::new(source),
        }
    }
}
