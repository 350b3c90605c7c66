use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A parameter or input lies outside the range where the operation is defined.
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed grid, strip layout or experiment configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Evaluation at a point where the metric has no curvature (e.g. r = 0).
    #[error("singular point: {0}")]
    Singular(String),
    #[error("time step {dt} exceeds stability bound {bound}")]
    Cfl { dt: f64, bound: f64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
