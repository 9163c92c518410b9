use thiserror::Error;

/// Errors raised by the sensor model, matching, and adjustment routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rational function denominator vanished ({value:e})")]
    SingularEvaluation { value: f64 },

    #[error("backward projection did not converge after {iterations} iterations (residual {residual_px:e} px)")]
    InverseDivergence { iterations: usize, residual_px: f64 },

    #[error("sample at ({x}, {y}) lies outside the raster")]
    Sampling { x: f64, y: f64 },

    #[error("correlation undefined: window has zero intensity variance")]
    UndefinedCorrelation,

    #[error("track {track}: {active} active observation(s), at least 2 required")]
    Underdetermined { track: u64, active: usize },

    #[error("track {track}: degenerate ray geometry (condition {condition:e})")]
    DegenerateGeometry { track: u64, condition: f64 },

    #[error("track {track}: reference selection failed, no valid window pairing")]
    Selection { track: u64 },

    #[error("normal system has no active tracks")]
    EmptySystem,

    #[error("reduced camera system is singular; datum is not fixed")]
    Gauge,

    #[error("bias adjustment diverged at iteration {iteration}")]
    AdjustmentDiverged { iteration: usize },

    #[error("pipeline failure: {0}")]
    Pipeline(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("image set mismatch: {0}")]
    ImageSetMismatch(String),

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("track {track} references unknown image {image}")]
    Integrity { track: u64, image: u32 },

    #[error("invalid value: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
