use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate embedding: zero norm")]
    DegenerateEmbedding,
    #[error("cancelling template embeddings for class `{0}`")]
    CancellingTemplates(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("missing classes: {}", .0.join(", "))]
    MissingClasses(Vec<String>),
    #[error("duplicate class name `{0}`")]
    DuplicateClass(String),
    #[error("class index {index} out of range for {n} classes")]
    ClassIndexOutOfRange { index: usize, n: usize },
    #[error("invalid prompt template `{0}`: must contain `{{class}}` exactly once")]
    InvalidTemplate(String),
    #[error("class entry `{name}` is missing `{field}`")]
    MissingMetadata { name: String, field: &'static str },
    #[error("degenerate box: zero or negative area")]
    DegenerateBox,
    #[error("empty class subset")]
    EmptySubset,
    #[error("image-label sample carries {0} labels; exactly one is supported")]
    MultiLabel(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("could not place objects without overlap after {0} attempts")]
    InfeasiblePlacement(usize),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
