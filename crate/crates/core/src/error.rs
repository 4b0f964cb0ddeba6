use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("taxonomy: {0}")]
    Taxonomy(String),

    #[error("prompt construction unsatisfiable: {0}")]
    Unsatisfiable(String),

    #[error("unknown subject id `{0}`")]
    UnknownSubject(String),

    #[error("attribute `{keyword}` is not compatible with subject `{subject}`")]
    Incompatible { keyword: String, subject: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no positive pair available: {0}")]
    StarvedRange(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact: {path} (produce it with `{producer}`)")]
    MissingArtifact { path: String, producer: String },

    #[error("tensor: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("image: {0}")]
    ImageCodec(#[from] image::ImageError),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn other(msg: impl Into<String>) -> Self {
        Error::Other(msg.into())
    }
}
