use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{what} = {value} is outside the valid range {range}")]
    OutOfRange {
        what: &'static str,
        value: f64,
        range: String,
    },

    #[error("differentiated output must be a scalar, got a {rows}x{cols} array")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("ODE solver exceeded {max_steps} steps (reached t = {t})")]
    MaxStepsExceeded { max_steps: usize, t: f64 },

    #[error("likelihood solve failed for sample {sample_id}, class {class:?}: {source}")]
    Solve {
        sample_id: usize,
        class: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn out_of_range(what: &'static str, value: f64, range: impl Into<String>) -> Self {
        Error::OutOfRange {
            what,
            value,
            range: range.into(),
        }
    }

    /// Attaches the (sample, class) context of a failed likelihood solve.
    pub fn in_solve(self, sample_id: usize, class: Option<usize>) -> Self {
        Error::Solve {
            sample_id,
            class,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
