//! Decoding hyperparameters. Ranges are enforced when the value is built, so a
//! [`Hyperparameters`] in hand is always usable.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::TokenId;

/// How per-candidate similarities enter the discriminative mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Similarities are mixed as-is.
    Raw,
    /// Each image's k-vector of similarities is softmax-normalized over the
    /// candidates before mixing.
    #[default]
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    #[default]
    Cosine,
    /// `2.5 * max(cos, 0)`.
    Clipscore,
}

/// Tokens that end generation once emitted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopTokens {
    /// The language model's end-of-text token plus its period token.
    #[default]
    LmDefault,
    Explicit(BTreeSet<TokenId>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{name} must lie in [{min}, {max}], got {value}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("{name} must be at least 1")]
    ZeroCount { name: &'static str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawHyperparameters", into = "RawHyperparameters")]
pub struct Hyperparameters {
    lambda: f64,
    delta: f64,
    beta: f64,
    alpha: f64,
    k: usize,
    max_tokens: usize,
    stop_tokens: StopTokens,
    norm_mode: NormMode,
    sim_mode: SimMode,
    strip_prompt_for_clip: bool,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            lambda: 0.75,
            delta: 0.5,
            beta: 2.0,
            alpha: 0.6,
            k: 45,
            max_tokens: 16,
            stop_tokens: StopTokens::LmDefault,
            norm_mode: NormMode::Softmax,
            sim_mode: SimMode::Cosine,
            strip_prompt_for_clip: false,
        }
    }
}

impl Hyperparameters {
    pub fn builder() -> HyperparametersBuilder {
        HyperparametersBuilder(Self::default())
    }

    /// Builder seeded with this value, for deriving variants.
    pub fn to_builder(&self) -> HyperparametersBuilder {
        HyperparametersBuilder(self.clone())
    }

    /// Weight of the target term against the distractor term.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Weight of the blurred-context view against the crop view.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Weight of the visual score against the language score.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Weight of the degeneration penalty against model confidence.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn stop_tokens(&self) -> &StopTokens {
        &self.stop_tokens
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode
    }

    pub fn sim_mode(&self) -> SimMode {
        self.sim_mode
    }

    /// When set, the text sent to the encoder omits the prompt.
    pub fn strip_prompt_for_clip(&self) -> bool {
        self.strip_prompt_for_clip
    }

    fn validate(self) -> Result<Self, ConfigError> {
        unit_interval("lambda", self.lambda)?;
        unit_interval("delta", self.delta)?;
        unit_interval("alpha", self.alpha)?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(ConfigError::OutOfRange {
                name: "beta",
                value: self.beta,
                min: 0.0,
                max: f64::INFINITY,
            });
        }
        if self.k == 0 {
            return Err(ConfigError::ZeroCount { name: "k" });
        }
        if self.max_tokens == 0 {
            return Err(ConfigError::ZeroCount { name: "max_tokens" });
        }
        Ok(self)
    }
}

pub(crate) fn unit_interval(name: &'static str, value: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ConfigError::OutOfRange {
            name,
            value,
            min: 0.0,
            max: 1.0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct HyperparametersBuilder(Hyperparameters);

impl HyperparametersBuilder {
    pub fn lambda(mut self, v: f64) -> Self {
        self.0.lambda = v;
        self
    }
    pub fn delta(mut self, v: f64) -> Self {
        self.0.delta = v;
        self
    }
    pub fn beta(mut self, v: f64) -> Self {
        self.0.beta = v;
        self
    }
    pub fn alpha(mut self, v: f64) -> Self {
        self.0.alpha = v;
        self
    }
    pub fn k(mut self, v: usize) -> Self {
        self.0.k = v;
        self
    }
    pub fn max_tokens(mut self, v: usize) -> Self {
        self.0.max_tokens = v;
        self
    }
    pub fn stop_tokens(mut self, v: StopTokens) -> Self {
        self.0.stop_tokens = v;
        self
    }
    pub fn norm_mode(mut self, v: NormMode) -> Self {
        self.0.norm_mode = v;
        self
    }
    pub fn sim_mode(mut self, v: SimMode) -> Self {
        self.0.sim_mode = v;
        self
    }
    pub fn strip_prompt_for_clip(mut self, v: bool) -> Self {
        self.0.strip_prompt_for_clip = v;
        self
    }

    pub fn build(self) -> Result<Hyperparameters, ConfigError> {
        self.0.validate()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct RawHyperparameters {
    lambda: f64,
    delta: f64,
    beta: f64,
    alpha: f64,
    k: usize,
    max_tokens: usize,
    stop_tokens: StopTokens,
    norm_mode: NormMode,
    sim_mode: SimMode,
    strip_prompt_for_clip: bool,
}

impl Default for RawHyperparameters {
    fn default() -> Self {
        Hyperparameters::default().into()
    }
}

impl From<Hyperparameters> for RawHyperparameters {
    fn from(h: Hyperparameters) -> Self {
        Self {
            lambda: h.lambda,
            delta: h.delta,
            beta: h.beta,
            alpha: h.alpha,
            k: h.k,
            max_tokens: h.max_tokens,
            stop_tokens: h.stop_tokens,
            norm_mode: h.norm_mode,
            sim_mode: h.sim_mode,
            strip_prompt_for_clip: h.strip_prompt_for_clip,
        }
    }
}

impl TryFrom<RawHyperparameters> for Hyperparameters {
    type Error = ConfigError;

    fn try_from(r: RawHyperparameters) -> Result<Self, Self::Error> {
        Hyperparameters {
            lambda: r.lambda,
            delta: r.delta,
            beta: r.beta,
            alpha: r.alpha,
            k: r.k,
            max_tokens: r.max_tokens,
            stop_tokens: r.stop_tokens,
            norm_mode: r.norm_mode,
            sim_mode: r.sim_mode,
            strip_prompt_for_clip: r.strip_prompt_for_clip,
        }
        .validate()
    }
}
