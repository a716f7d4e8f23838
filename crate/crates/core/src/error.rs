use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Validation(String),
    #[error("operator is not Hermitian (largest deviation {0:.3e})")]
    NotHermitian(f64),
    #[error("quadrature grid too coarse: need at least {required} steps, got {given}")]
    Resolution { required: usize, given: usize },
    #[error("time step {dt:.3e} s exceeds the bound {bound:.3e} s")]
    StepTooLarge { dt: f64, bound: f64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) => 2,
            Error::NotHermitian(_)
            | Error::Resolution { .. }
            | Error::StepTooLarge { .. }
            | Error::Numerical(_) => 3,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
