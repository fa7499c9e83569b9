use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("a noise schedule needs at least one timestep")]
    EmptySchedule,

    #[error("beta at timestep {t} is {value}, expected a value in (0, 1) with 1 - beta < 1")]
    BetaOutOfRange { t: usize, value: f64 },

    #[error("beta_start {start} exceeds beta_end {end}")]
    DecreasingBetas { start: f64, end: f64 },

    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("zero noise variance at timestep {t}")]
    DegenerateNoise { t: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("ambient dimension {0} outside the supported range 1..=8")]
    UnsupportedDimension(usize),

    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("distribution has no points or components")]
    EmptyDistribution,

    #[error("weight {index} is {value}, weights must be finite and nonnegative")]
    InvalidWeight { index: usize, value: f64 },

    #[error("weights sum to {0}, expected 1 within 1e-12")]
    WeightsNotNormalized(f64),

    #[error("covariance {index} is not symmetric")]
    AsymmetricCovariance { index: usize },

    #[error("covariance {index} is not positive definite")]
    NotPositiveDefinite { index: usize },

    #[error("input contains a non-finite coordinate")]
    NonFiniteInput,

    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),

    #[error("grid quadrature supports at most 2 dimensions, got {0}")]
    QuadratureDimension(usize),

    #[error("quadrature grid too coarse: refinement changed the estimate by {change:e} (tolerance {tolerance:e})")]
    GridTooCoarse { change: f64, tolerance: f64 },

    #[error("need at least {required} samples, got {got}")]
    TooFewSamples { required: usize, got: usize },

    #[error("every grid cell is empty")]
    EmptyGrid,

    #[error("no fitted predictor for timestep {0}")]
    MissingPredictor(usize),

    #[error("predictor returned a non-finite value at timestep {t}")]
    NonFinitePrediction { t: usize, xt: Vec<f64> },
}
