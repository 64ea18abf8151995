use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unit index {index} out of range for {n_units} units")]
    IndexOutOfRange { index: usize, n_units: usize },
    #[error("self-loop on unit {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) has a degree-0 endpoint")]
    IsolatedEndpoint(usize, usize),
    #[error("unit {0} has no neighbors; exposure is undefined")]
    IsolatedUnit(usize),
    #[error("need at least 3 units to partition, got {0}")]
    TooFewUnits(usize),
    #[error("invalid split fractions: {0}")]
    BadFractions(String),
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("activation {value} outside [0, 1]")]
    ActivationOutOfRange { value: f64 },
    #[error("exposure {0} outside [0, 1]")]
    OutOfRangeExposure(f64),
    #[error("transport problem too large: {n} x {m} exceeds 4096 cells")]
    TooLarge { n: usize, m: usize },
    #[error("linear program infeasible: {0}")]
    InfeasibleLp(String),
    #[error("dataset has no potential-outcome oracle")]
    MissingOracle,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable snake_case identifier, used where failures are recorded as data.
    pub fn code(&self) -> &'static str {
        match self {
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::SelfLoop(_) => "self_loop",
            Error::IsolatedEndpoint(..) => "isolated_endpoint",
            Error::IsolatedUnit(_) => "isolated_unit",
            Error::TooFewUnits(_) => "too_few_units",
            Error::BadFractions(_) => "bad_fractions",
            Error::BadDimensions(_) => "bad_dimensions",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::ActivationOutOfRange { .. } => "activation_out_of_range",
            Error::OutOfRangeExposure(_) => "out_of_range_exposure",
            Error::TooLarge { .. } => "too_large",
            Error::InfeasibleLp(_) => "infeasible_lp",
            Error::MissingOracle => "missing_oracle",
            Error::LengthMismatch(..) => "length_mismatch",
            Error::Config(_) => "config",
            Error::Parse(_) => "parse",
            Error::Training(_) => "training",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
