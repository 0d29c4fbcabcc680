//! Model interfaces. The engine only ever talks to a [`LanguageModel`] and an
//! [`Encoder`]; [`toy`] provides an analytically tractable implementation of
//! both and [`protocol`] a client for models served out of process.

pub mod conformance;
pub mod protocol;
pub mod toy;

use thiserror::Error;

use crate::embedding::{Embedding, EmbeddingError};
use crate::imaging::Image;

pub type TokenId = u32;

/// One next-token proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub token: TokenId,
    pub p_model: f64,
    /// LM hidden state at the candidate position, used for the degeneration penalty.
    pub hidden: Embedding,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("server error [{code}]: {message}")]
    Server { code: String, message: String },
    #[error("embedding has dimension {actual}, negotiated {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("unknown token id {0}")]
    UnknownToken(TokenId),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// A causal language model as seen by the decoder.
///
/// Implementations must be deterministic for a fixed context. `top_k` returns
/// `min(k, vocab_size)` candidates sorted by probability descending, ties by
/// token id ascending, with probabilities in `(0, 1]`.
pub trait LanguageModel: Send + Sync {
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError>;
    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, BackendError>;
    fn top_k(&self, context: &[TokenId], k: usize) -> Result<Vec<Candidate>, BackendError>;
    fn eot_token(&self) -> TokenId;
    fn vocab_size(&self) -> usize;
}

/// Text and image encoders into one shared space of dimension `dim()`.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_text(&self, text: &str) -> Result<Embedding, BackendError>;
    fn encode_image(&self, image: &Image) -> Result<Embedding, BackendError>;
}

impl<T: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<T> {
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        (**self).tokenize(text)
    }
    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        (**self).detokenize(tokens)
    }
    fn top_k(&self, context: &[TokenId], k: usize) -> Result<Vec<Candidate>, BackendError> {
        (**self).top_k(context, k)
    }
    fn eot_token(&self) -> TokenId {
        (**self).eot_token()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
}

impl<T: Encoder + ?Sized> Encoder for std::sync::Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn encode_text(&self, text: &str) -> Result<Embedding, BackendError> {
        (**self).encode_text(text)
    }
    fn encode_image(&self, image: &Image) -> Result<Embedding, BackendError> {
        (**self).encode_image(image)
    }
}
