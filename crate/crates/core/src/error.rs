use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid face mesh: {0}")]
    Mesh(String),

    #[error("semantic keypoint `{keypoint}` required by AU {au} is missing from the mesh")]
    MissingKeypoint { keypoint: String, au: u8 },

    #[error("missing keypoints: {}", .0.join(", "))]
    MissingKeypoints(Vec<String>),

    #[error("eye centers coincide; inter-ocular distance is zero")]
    DegenerateEyes,

    #[error("inter-ocular distance must be positive, got {0}")]
    NonPositiveInterocular(f64),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("detector `{name}` failed: {message}")]
    Detector { name: String, message: String },

    #[error("scene backend `{name}` failed: {message}")]
    SceneBackend { name: String, message: String },

    #[error("unknown layer id {requested}; valid ids: {valid:?}")]
    UnknownLayer { requested: usize, valid: Vec<usize> },

    #[error("weights error: {0}")]
    Weights(String),

    #[error("no background remains after subject removal")]
    NoBackground,

    #[error("{0}")]
    EmptySplit(String),

    #[error("no labeled records in manifest")]
    NoLabels,

    #[error("no records carry demographic tags")]
    NoTags,

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("neutral baseline missing; compute it from Neutral-labeled training samples first")]
    MissingBaseline,

    #[error("video decode failed for {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
