use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A state or stage value became non-finite.
    #[error("numerical divergence at step {step}")]
    Divergence { step: usize },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("trajectories do not share a time grid")]
    GridMismatch,

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("observer is missing {0}")]
    Missing(&'static str),

    #[error("A - GC is not Hurwitz (max real part {0})")]
    NotHurwitz(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidValue {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                context,
                expected,
                got,
            })
        }
    }
}
