use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("k-means: {0}")]
    Clustering(String),
    #[error("random forest: {0}")]
    Forest(String),
    #[error("selector: {0}")]
    Selector(String),
    #[error("split model: {0}")]
    Split(String),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
