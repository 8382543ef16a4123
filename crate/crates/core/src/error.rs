use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("referential error: {0}")]
    Referential(String),

    #[error(
        "coverage error: recipe {recipe_id} needs {required} image positions but only {available} steps carry images"
    )]
    Coverage {
        recipe_id: String,
        required: usize,
        available: usize,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no frame inside span of recipe {recipe_id} step {step}")]
    NoFrame { recipe_id: String, step: usize },

    #[error("empty corpus: no usable recipes")]
    EmptyCorpus,

    #[error("edit error at step {step}: {message}")]
    Edit { step: usize, message: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("empty metric: {0}")]
    EmptyMetric(String),

    #[error("incomplete inputs: {0}")]
    Incomplete(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
