//! The generation loop.
//!
//! Region embeddings are computed once per scene. Each step asks the language
//! model for its top-k continuations, encodes the text extended by every
//! candidate, scores the candidates and appends the best one, until a stop
//! token or the token budget.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Candidate, Encoder, LanguageModel, TokenId};
use crate::embedding::{Embedding, RegionRepresentation};
use crate::hyper::{Hyperparameters, StopTokens};
use crate::imaging::{represent_region, ImagingConfig, ImagingError};
use crate::scene::Scene;
use crate::scoring::{argmax_candidate, score_candidates, CandidateScore, ScoringError};

/// Region representations of one scene, fixed across decoding steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEmbeddings {
    pub target: RegionRepresentation,
    /// Every non-target region, in scene order.
    pub distractors: Vec<RegionRepresentation>,
    region_ids: Vec<String>,
    target_index: usize,
}

impl SceneEmbeddings {
    /// `reps` holds one representation per region in scene order.
    pub fn from_regions(
        region_ids: Vec<String>,
        mut reps: Vec<RegionRepresentation>,
        target_index: usize,
    ) -> Self {
        assert_eq!(region_ids.len(), reps.len(), "one representation per region");
        assert!(target_index < reps.len(), "target index out of range");
        let target = reps.remove(target_index);
        Self {
            target,
            distractors: reps,
            region_ids,
            target_index,
        }
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn target_id(&self) -> &str {
        &self.region_ids[self.target_index]
    }

    /// `(id, representation)` for every region, in scene order.
    pub fn regions(&self) -> Vec<(&str, &RegionRepresentation)> {
        let mut distractors = self.distractors.iter();
        self.region_ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let rep = if i == self.target_index {
                    &self.target
                } else {
                    distractors.next().expect("distractor count matches ids")
                };
                (id.as_str(), rep)
            })
            .collect()
    }

    /// The same scene with a different region as target.
    pub fn retargeted(&self, target_index: usize) -> Self {
        let reps = self.regions().into_iter().map(|(_, r)| r.clone()).collect();
        Self::from_regions(self.region_ids.clone(), reps, target_index)
    }

    /// Only the target remains; used to compare against runs that ignore distractors.
    pub fn without_distractors(&self) -> Self {
        Self::from_regions(
            vec![self.target_id().to_string()],
            vec![self.target.clone()],
            0,
        )
    }
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("scene has no target region `{0}`")]
    MissingTarget(String),
    #[error("imaging failed for region `{region}`: {source}")]
    Imaging {
        region: String,
        #[source]
        source: ImagingError,
    },
    #[error("backend failed at step {step}: {source}")]
    Backend {
        step: usize,
        #[source]
        source: BackendError,
    },
    #[error("backend failed before decoding: {0}")]
    Setup(#[source] BackendError),
    #[error("invalid candidates at step {step}: {detail}")]
    InvalidCandidates { step: usize, detail: String },
    #[error("scoring failed at step {step}: {source}")]
    Scoring {
        step: usize,
        #[source]
        source: ScoringError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StopToken,
    MaxTokens,
}

/// Scores of every candidate at one step and the index that won.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub candidates: Vec<CandidateScore>,
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Detokenized generated suffix, prompt and end-of-text excluded.
    pub expression: String,
    /// Generated token ids, stop token included.
    pub tokens: Vec<TokenId>,
    pub trace: Vec<StepTrace>,
    pub stop_reason: StopReason,
}

/// Encodes every region of a validated scene once.
pub fn precompute_scene_embeddings(
    scene: &Scene,
    encoder: &dyn Encoder,
    cfg: &ImagingConfig,
) -> Result<SceneEmbeddings, DecodeError> {
    let target_index = scene
        .target_index()
        .ok_or_else(|| DecodeError::MissingTarget(scene.target_id.clone()))?;
    let reps = scene
        .regions
        .iter()
        .map(|region| {
            represent_region(&scene.image, region.bbox, cfg, encoder).map_err(|source| {
                DecodeError::Imaging {
                    region: region.id.clone(),
                    source,
                }
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let ids = scene.regions.iter().map(|r| r.id.clone()).collect();
    Ok(SceneEmbeddings::from_regions(ids, reps, target_index))
}

/// End-of-text plus the tokenizer's period token, when `.` is a single token.
pub fn resolve_stop_tokens(
    stop: &StopTokens,
    lm: &dyn LanguageModel,
) -> Result<BTreeSet<TokenId>, BackendError> {
    match stop {
        StopTokens::Explicit(set) => Ok(set.clone()),
        StopTokens::LmDefault => {
            let mut set = BTreeSet::from([lm.eot_token()]);
            if let Ok(period) = lm.tokenize(".") {
                if let [p] = period[..] {
                    set.insert(p);
                }
            }
            Ok(set)
        }
    }
}

fn check_candidates(step: usize, cands: &[Candidate]) -> Result<(), DecodeError> {
    let invalid = |detail: String| DecodeError::InvalidCandidates { step, detail };
    let first = cands
        .first()
        .ok_or_else(|| invalid("language model returned no candidates".into()))?;
    let mut seen = BTreeSet::new();
    for c in cands {
        if !(c.p_model >= 0.0 && c.p_model <= 1.0) {
            return Err(invalid(format!("token {} has probability {}", c.token, c.p_model)));
        }
        if c.hidden.dim() != first.hidden.dim() {
            return Err(invalid(format!(
                "hidden state of token {} has dimension {}, expected {}",
                c.token,
                c.hidden.dim(),
                first.hidden.dim()
            )));
        }
        if !seen.insert(c.token) {
            return Err(invalid(format!("token {} proposed twice", c.token)));
        }
    }
    Ok(())
}

/// Greedy guided decoding from `prompt` for the scene's target region.
pub fn generate(
    scene: &SceneEmbeddings,
    lm: &dyn LanguageModel,
    encoder: &dyn Encoder,
    prompt: &str,
    hyper: &Hyperparameters,
) -> Result<GenerationResult, DecodeError> {
    let prompt_tokens = lm.tokenize(prompt).map_err(DecodeError::Setup)?;
    let stop_tokens = resolve_stop_tokens(hyper.stop_tokens(), lm).map_err(DecodeError::Setup)?;
    let text_prefix: &[TokenId] = if hyper.strip_prompt_for_clip() {
        &[]
    } else {
        &prompt_tokens
    };

    let mut generated: Vec<TokenId> = Vec::new();
    let mut hiddens: Vec<Embedding> = Vec::new();
    let mut trace = Vec::new();
    let mut stop_reason = StopReason::MaxTokens;

    for step in 0..hyper.max_tokens() {
        let backend = |source| DecodeError::Backend { step, source };

        let mut context = prompt_tokens.clone();
        context.extend_from_slice(&generated);
        let candidates = lm.top_k(&context, hyper.k()).map_err(backend)?;
        check_candidates(step, &candidates)?;

        let mut text_tokens: Vec<TokenId> = text_prefix.iter().chain(&generated).copied().collect();
        let mut text_embs = Vec::with_capacity(candidates.len());
        for cand in &candidates {
            text_tokens.push(cand.token);
            let text = lm.detokenize(&text_tokens).map_err(backend)?;
            text_tokens.pop();
            text_embs.push(encoder.encode_text(&text).map_err(backend)?);
        }

        let scores = score_candidates(
            &candidates,
            &text_embs,
            &scene.target,
            &scene.distractors,
            &hiddens,
            hyper,
        )
        .map_err(|source| DecodeError::Scoring { step, source })?;
        let chosen = argmax_candidate(&scores).expect("candidates are non-empty");
        let token = candidates[chosen].token;

        generated.push(token);
        hiddens.push(candidates[chosen].hidden.clone());
        trace.push(StepTrace {
            candidates: scores,
            chosen,
        });
        if stop_tokens.contains(&token) {
            stop_reason = StopReason::StopToken;
            break;
        }
    }

    let eot = lm.eot_token();
    let visible: Vec<TokenId> = generated.iter().copied().filter(|&t| t != eot).collect();
    let expression = lm
        .detokenize(&visible)
        .map_err(|source| DecodeError::Backend {
            step: generated.len(),
            source,
        })?
        .trim()
        .to_string();

    Ok(GenerationResult {
        expression,
        tokens: generated,
        trace,
        stop_reason,
    })
}
