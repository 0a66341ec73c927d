use thiserror::Error;

/// Errors raised by the calibration library.
#[derive(Debug, Error)]
pub enum CalibError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("price {price} outside arbitrage bounds ({lower}, {upper}) for {kind} strike {strike}")]
    OutOfBounds {
        price: f64,
        lower: f64,
        upper: f64,
        strike: f64,
        kind: &'static str,
    },

    #[error("grid at step {step} needs {requested} points, cap is {cap}")]
    GridCap { step: usize, requested: usize, cap: usize },

    #[error("calibration time {time} is not on the time grid with step {step}")]
    OffGrid { time: f64, step: f64 },

    #[error("degenerate mass at step {step}: every source weight vanished for target index {index}")]
    DegenerateMass { step: usize, index: usize },

    #[error("price Newton at step {step} failed after {iterations} iterations (residual {residual:e})")]
    PriceNewton {
        step: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("table error: {0}")]
    Table(String),

    #[error("scale N_T = {n_steps} failed")]
    AtScale {
        n_steps: usize,
        #[source]
        source: Box<CalibError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for CalibError {
    fn from(e: csv::Error) -> Self {
        CalibError::Table(e.to_string())
    }
}

impl CalibError {
    /// Tags the error with the ladder scale it came from.
    pub fn at_scale(self, n_steps: usize) -> Self {
        CalibError::AtScale {
            n_steps,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, CalibError>;
