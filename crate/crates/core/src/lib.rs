//! Discriminative referring-expression generation.
//!
//! A language model proposes the top-k next tokens; every candidate continuation
//! is scored against a target image region and penalized against the other
//! regions of the scene in a shared visual-semantic embedding space, and the
//! best fused score wins. Model access goes through the [`backends`] traits,
//! so the engine runs the same way against the deterministic toy world and a
//! remote model server.

pub mod backends;
pub mod decoding;
pub mod embedding;
pub mod eval;
pub mod hyper;
pub mod imaging;
pub mod scene;
pub mod scoring;

pub use backends::{BackendError, Candidate, Encoder, LanguageModel, TokenId};
pub use decoding::{
    generate, precompute_scene_embeddings, DecodeError, GenerationResult, SceneEmbeddings,
    StepTrace, StopReason,
};
pub use embedding::{Embedding, EmbeddingError, RegionRepresentation};
pub use hyper::{ConfigError, Hyperparameters, NormMode, SimMode, StopTokens};
pub use imaging::{Image, ImagingConfig, ImagingError, RepresentationMode};
pub use scene::{validate_scene, BBox, Region, Scene, SceneError};
pub use scoring::{CandidateScore, ScoringError};
