use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("invalid grid {width}x{height}: both sides must be at least 2")]
    InvalidGrid { width: usize, height: usize },

    #[error("invalid heatmap: {0}")]
    InvalidHeatmap(String),

    #[error("center ({x}, {y}) lies outside the grid")]
    CenterOutOfBounds { x: f64, y: f64 },

    /// The Bessel-corrected covariance denominator `V1 - V2/V1` vanished.
    #[error(
        "degenerate distribution: unbiased covariance denominator V1 - V2/V1 = {denominator:e} is below {threshold:e}"
    )]
    DegenerateDistribution { denominator: f64, threshold: f64 },

    #[error("grid mismatch: {left} vs {right}")]
    GridMismatch { left: String, right: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("normalizing distance must be positive, got {0}")]
    ZeroNormalizer(f64),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("landmark {index} at ({x:.3}, {y:.3}) violates the border margin of {margin:.3} px")]
    LandmarkOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        margin: f64,
    },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
