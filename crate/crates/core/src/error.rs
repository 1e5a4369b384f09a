use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sigma_eff is undefined for the base level")]
    BaseLevelSigma,

    #[error("input {width}x{height} too small for the layer stack (needs at least {min}x{min})")]
    InputTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("pyramid level {level}: {source}")]
    Level {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate vocabulary sample: {0}")]
    DegenerateVocabulary(String),

    #[error("descriptor is all zeros")]
    ZeroDescriptor,

    #[error("rank-deficient sample: requested {requested} dimensions, achievable {achievable}")]
    RankDeficient { requested: usize, achievable: usize },

    #[error("query {0} has no positive within the positive radius")]
    NoPositive(u64),

    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("duplicate id {0}")]
    DuplicateId(u64),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("records with missing image files: {0:?}")]
    BrokenRecords(Vec<u64>),

    #[error("no evaluable queries")]
    EmptyEvaluation,

    #[error("bad file format: {0}")]
    Format(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_level(self, level: usize) -> Error {
        Error::Level {
            level,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
