use thiserror::Error;

/// Errors raised by the filtering toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{name}`: {detail}")]
    Dimension { name: &'static str, detail: String },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("matrix `{name}` is not symmetric")]
    NotSymmetric { name: &'static str },

    #[error("matrix `{name}` is not positive definite")]
    NotPositiveDefinite { name: &'static str },

    #[error("singular bearing geometry: target coincides with sensor {sensor}")]
    SingularGeometry { sensor: usize },

    #[error("non-finite value at step {step}: {context}")]
    NonFinite { step: usize, context: String },

    #[error("state blow-up at step {step} (|x| = {norm:e})")]
    BlowUp { step: usize, norm: f64 },

    #[error("need at least {needed} particles, got {got}")]
    TooFewParticles { needed: usize, got: usize },

    #[error("Galerkin system is degenerate: every cell is empty")]
    AllCellsEmpty,

    #[error("density has zero mass on the grid")]
    ZeroMass,

    #[error("time step {dt:e} violates the explicit grid stability limit; use dt <= {max_dt:e}")]
    Cfl { dt: f64, max_dt: f64 },

    #[error("covariance lost positive semidefiniteness (min eigenvalue {min_eig:e}); try a smaller dt")]
    Unstable { min_eig: f64 },

    #[error("Smoluchowski replicate {replicate} blew up")]
    ReplicateBlowUp { replicate: usize },

    #[error("no spectral gap available: {0}")]
    MissingSpectralGap(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("misaligned time grids: {0}")]
    Misaligned(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps `self` with a description of where it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error beneath any context layers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

pub(crate) fn dimension(name: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        name,
        detail: detail.into(),
    }
}
