use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cannot split subgroup {group}: {reason}")]
    Split { group: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("invalid cohort spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),

    #[error("model format error (expected format version {expected}): {reason}")]
    ModelFormat { expected: u32, reason: String },

    #[error("IRT error: {0}")]
    Irt(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("round {round}, subgroup {subgroup}: {source}")]
    Federation {
        round: usize,
        subgroup: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn in_round(self, round: usize, subgroup: impl Into<String>) -> Self {
        Error::Federation {
            round,
            subgroup: subgroup.into(),
            source: Box::new(self),
        }
    }
}
