use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged in stage `{stage}`: {detail}")]
    Divergence { stage: String, detail: String },

    #[error("degenerate task: {0}")]
    Degenerate(String),

    #[error("labeling incomplete: {0}")]
    LabelingIncomplete(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("annotator client error: {0}")]
    Client(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape2(op: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
    }
}
