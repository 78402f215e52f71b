use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not skew-symmetric (max |J + J^T| = {deviation:e})")]
    SkewSymmetry { deviation: f64 },

    #[error("fixed-point solve did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("implicit step Jacobian is numerically singular (condition estimate {condition:e})")]
    SingularImplicitJacobian { condition: f64 },

    #[error("layer {index}: {source}")]
    Layer { index: usize, source: Box<Error> },

    #[error("expected structure {expected}, found {found}")]
    WrongStructure {
        expected: &'static str,
        found: &'static str,
    },

    #[error("layer {index} does not match its structure tag: {reason}")]
    StructureViolation { index: usize, reason: String },

    #[error("shallow sum is not in the form A_j = h X W_j^T (max deviation {certificate:e})")]
    NotRepresentable { certificate: f64 },

    #[error("inner weight matrix of term {term} is singular")]
    SingularW { term: usize },

    #[error("matrix is singular")]
    Singular,

    #[error("rank repair of term {term} failed after {attempts} resamples")]
    RepairFailed { term: usize, attempts: usize },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("truncated spectral tail {tail:e} exceeds 10% of the integral {integral:e}")]
    TruncationTooTight { tail: f64, integral: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn at_layer(self, index: usize) -> Self {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            found,
        })
    }
}
