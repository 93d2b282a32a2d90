use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("block {requested} applied to features at block {found}")]
    BlockOrder { requested: usize, found: usize },

    #[error("codebook: {0}")]
    Codebook(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("group sizes K_g1={k_g1}, K_g2={k_g2} invalid for K={k}")]
    GroupSize { k: usize, k_g1: usize, k_g2: usize },

    #[error("requested top-{k} from {available} support pairs")]
    TopK { k: usize, available: usize },

    #[error("config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing weights for method {0}")]
    MissingWeights(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
