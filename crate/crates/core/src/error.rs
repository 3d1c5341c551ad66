use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("gradient root node {0} is not a scalar")]
    RootNotScalar(usize),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("token {token} is outside the vocabulary (size {vocab_size})")]
    OutOfVocabulary { token: usize, vocab_size: usize },

    #[error("layer {layer} out of range 1..={max}")]
    LayerOutOfRange { layer: usize, max: usize },

    #[error("invalid neuron: {0}")]
    InvalidNeuron(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("enumeration guard: {0}")]
    SizeGuard(String),

    #[error("numerical divergence during {stage} (step {step}): loss = {loss}")]
    Divergence {
        stage: &'static str,
        step: usize,
        loss: f64,
    },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("malformed artifact {path}: {detail}")]
    MalformedArtifact { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
