use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("all weights are zero")]
    ZeroWeights,

    #[error("weights have non-positive mean {0}")]
    NonPositiveMean(f64),

    #[error("t = {t} is below t_min = {t_min}")]
    BelowTmin { t: u64, t_min: u64 },

    #[error("grids differ: {0}")]
    GridMismatch(String),

    #[error("candidate is not absolutely continuous w.r.t. the reference at grid index {0}")]
    NotAbsolutelyContinuous(usize),

    #[error("empty layer list")]
    EmptyLayers,

    #[error("missing oracle for criterion {0}")]
    MissingOracle(String),

    #[error("missing prerequisite artifact for stage {0}")]
    MissingPrerequisite(String),

    #[error("artifact {path} exists with a different hash (existing {existing}, new {new})")]
    ArtifactConflict {
        path: String,
        existing: String,
        new: String,
    },

    #[error("report incomplete: {0}")]
    Incomplete(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
