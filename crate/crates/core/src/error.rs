use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("singular implicit system at step {step}, path {path}")]
    SingularSystem { step: usize, path: usize },
    #[error("control is not adapted: {0}")]
    NonAdaptedControl(String),
    #[error("ensembles do not match: {0}")]
    Mismatch(String),
    #[error("exhaustive search needs {evaluations} evaluations (budget {budget}); use coordinate-descent mode")]
    BudgetExceeded { evaluations: u128, budget: u128 },
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("io failed: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
