use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by layer `{layer}`")]
    NonFinite { layer: String },

    #[error("invalid sparsity: {0}")]
    Sparsity(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("replica {replica} failed in phase {phase}: {source}")]
    Replica {
        phase: usize,
        replica: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
