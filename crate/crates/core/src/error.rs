use thiserror::Error;

use crate::solver::SolveReport;

pub type Result<T> = std::result::Result<T, MsfemError>;

#[derive(Debug, Error)]
pub enum MsfemError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coefficient field rejected: {0}")]
    NotElliptic(String),

    #[error("assembly failed on element {element}: {reason}")]
    Assembly { element: usize, reason: String },

    #[error("solver did not converge after {} iterations (residual {:.3e})", .0.iterations, .0.residual)]
    ConvergenceFailure(SolveReport),

    #[error("local problem on element {element} failed: {source}")]
    Element {
        element: usize,
        #[source]
        source: Box<MsfemError>,
    },

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MsfemError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MsfemError::InvalidArgument(msg.into())
    }

    pub(crate) fn on_element(self, element: usize) -> Self {
        MsfemError::Element {
            element,
            source: Box::new(self),
        }
    }
}
