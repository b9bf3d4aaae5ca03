use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by {op}{context}")]
    NonFinite { op: String, context: String },

    #[error("invalid phantom spec: {0}")]
    Phantom(String),

    #[error("mixture estimation: {0}")]
    Mixture(String),

    #[error("em step: weighted posteriors sum to zero at unlabeled pixel {pixel}")]
    ZeroDenominator { pixel: usize },

    #[error("no unlabeled pixels")]
    NoUnlabeled,

    #[error("no labeled pixels")]
    NoLabeled,

    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    #[error("augmentation: {0}")]
    Augment(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("pgm: {0}")]
    Pgm(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
