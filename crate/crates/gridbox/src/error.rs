//! Crate-wide error type. Recoverable conditions only; shape mismatches
//! between predicted and target tensors are programming errors and panic.

use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("invalid image bounds {width}x{height}: sides must be positive and finite")]
    InvalidBounds { width: f64, height: f64 },

    #[error("mapping ratio {0} out of range: must be finite and >= 1")]
    InvalidRatio(f64),

    #[error("zero-area proposal cannot define a mapping region")]
    ZeroAreaProposal,

    #[error("invalid grid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid heatmap: {0}")]
    InvalidHeatmap(String),

    #[error("undecodable box: {side} point group has zero total confidence")]
    UndecodableBox { side: &'static str },

    #[error("invalid cascade config: {0}")]
    InvalidCascade(String),

    #[error("invalid oracle params: {0}")]
    InvalidOracleParams(String),

    #[error("score {name}={value} outside [0, 1]")]
    ScoreOutOfRange { name: &'static str, value: f64 },

    #[error("exponent gamma={0} outside [0, 1]")]
    InvalidGamma(f64),

    #[error("{0} model has no trained parameters; train or load it first")]
    UntrainedModel(&'static str),

    #[error("loss component {name}={value} must be non-negative and finite")]
    InvalidLossComponent { name: &'static str, value: f64 },

    #[error("invalid scenario params: {0}")]
    InvalidScenario(String),

    #[error("sampling {what} failed after {attempts} attempts in scene {scene_id}")]
    SamplingExhausted {
        what: &'static str,
        attempts: u32,
        scene_id: u64,
    },

    #[error("detection references unknown scene id {0}")]
    UnknownScene(u64),

    #[error("schema version mismatch in {what}: expected {expected}, found {found}")]
    SchemaVersion {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("model kind mismatch: expected {expected}, found {found}")]
    ModelKind { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("gradient check failed: coordinate {coordinate} relative error {rel_err:.3e} exceeds {tolerance:.3e}")]
    GradcheckFailed {
        coordinate: usize,
        rel_err: f64,
        tolerance: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    TomlSerialize(#[from] toml::ser::Error),
}
