use thiserror::Error;

/// Errors raised by model evaluation, particle updates and the estimation driver.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter box: {0}")]
    InvalidBox(String),

    #[error("invalid step-size schedule: {0}")]
    InvalidSchedule(String),

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("model evaluation failed: {0}")]
    ModelEvaluation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("particle weights degenerate at step {step}: {what} log-mass {log_mass} below threshold")]
    Degeneracy {
        step: usize,
        what: &'static str,
        log_mass: f64,
    },

    #[error("rejection sampler exceeded {attempts} attempts; the state box is probably mis-specified")]
    RejectionCap { attempts: usize },

    #[error("observation outside the observation box at step {step}")]
    ObservationOutsideBox { step: usize },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    /// Attach a step index unless the error already carries one.
    pub fn at_step(self, step: usize) -> Error {
        match self {
            e @ (Error::Degeneracy { .. }
            | Error::ObservationOutsideBox { .. }
            | Error::AtStep { .. }) => e,
            other => Error::AtStep {
                step,
                source: Box::new(other),
            },
        }
    }

    /// Step index carried by the error, if any.
    pub fn step(&self) -> Option<usize> {
        match self {
            Error::Degeneracy { step, .. }
            | Error::ObservationOutsideBox { step }
            | Error::AtStep { step, .. } => Some(*step),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
