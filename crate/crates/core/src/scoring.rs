//! Score arithmetic for one decoding step.
//!
//! For every top-k candidate `v` the engine computes
//!
//! ```text
//! S(region)  = δ·sim(text, blur view) + (1−δ)·sim(text, crop view)
//! L_vis      = λ·S⁺ − (1−λ)·mean_i S⁻_i
//! L_lang     = (1−α)·p(v | context) − α·max_j cos(h_v, h_j)
//! fused      = L_lang + β·L_vis
//! ```
//!
//! where `S⁺`/`S⁻_i` are optionally softmax-normalized over the k candidates,
//! separately for each region.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Candidate, TokenId};
use crate::embedding::{Embedding, EmbeddingError, RegionRepresentation};
use crate::hyper::{unit_interval, ConfigError, Hyperparameters, NormMode, SimMode};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoringError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("empty score list")]
    Empty,
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("length mismatch: {candidates} candidates but {texts} text embeddings")]
    LengthMismatch { candidates: usize, texts: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// All score components for one candidate token at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub token: TokenId,
    pub p_model: f64,
    pub s_plus: f64,
    pub s_minus_mean: f64,
    pub l_disclip: f64,
    pub degen_penalty: f64,
    pub l_lang: f64,
    pub fused: f64,
}

fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, ScoringError> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(ScoringError::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Text-image similarity in the shared space.
pub fn similarity(text: &Embedding, image: &Embedding, mode: SimMode) -> Result<f64, ScoringError> {
    let cos = cosine(text, image)?;
    Ok(match mode {
        SimMode::Cosine => cos,
        SimMode::Clipscore => 2.5 * cos.max(0.0),
    })
}

/// Softmax over one image's candidate scores.
pub fn candidate_distribution(scores: &[f64]) -> Result<Vec<f64>, ScoringError> {
    if scores.is_empty() {
        return Err(ScoringError::Empty);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ScoringError::NonFinite("candidate score"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `δ·sim(text, blur) + (1−δ)·sim(text, crop)`.
pub fn region_similarity(
    text: &Embedding,
    rep: &RegionRepresentation,
    delta: f64,
    mode: SimMode,
) -> Result<f64, ScoringError> {
    unit_interval("delta", delta)?;
    let blur = similarity(text, &rep.blur_emb, mode)?;
    let crop = similarity(text, &rep.crop_emb, mode)?;
    Ok(delta * blur + (1.0 - delta) * crop)
}

/// `λ·S⁺ − (1−λ)·mean(S⁻)`; the distractor term is 0 when there are none.
pub fn disclip_score(s_plus: f64, s_minus: &[f64], lambda: f64) -> Result<f64, ScoringError> {
    unit_interval("lambda", lambda)?;
    if !s_plus.is_finite() || s_minus.iter().any(|s| !s.is_finite()) {
        return Err(ScoringError::NonFinite("similarity"));
    }
    if s_minus.is_empty() {
        return Ok(lambda * s_plus);
    }
    Ok(lambda * s_plus - (1.0 - lambda) * mean(s_minus))
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Largest cosine between a candidate's hidden state and any earlier one; 0
/// before the first generated token.
pub fn degeneration_penalty(hidden: &Embedding, previous: &[Embedding]) -> Result<f64, ScoringError> {
    let mut worst: Option<f64> = None;
    for prev in previous {
        let c = cosine(hidden, prev)?;
        worst = Some(worst.map_or(c, |w| w.max(c)));
    }
    Ok(worst.unwrap_or(0.0))
}

/// `(1−α)·p − α·penalty`.
pub fn language_score(
    p_model: f64,
    hidden: &Embedding,
    previous: &[Embedding],
    alpha: f64,
) -> Result<f64, ScoringError> {
    unit_interval("alpha", alpha)?;
    let penalty = degeneration_penalty(hidden, previous)?;
    Ok(combine_language(p_model, penalty, alpha))
}

fn combine_language(p_model: f64, penalty: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * p_model - alpha * penalty
}

/// `L_lang + β·L_vis`.
pub fn fused_score(l_lang: f64, l_disclip: f64, beta: f64) -> Result<f64, ScoringError> {
    if !l_lang.is_finite() || !l_disclip.is_finite() || !beta.is_finite() {
        return Err(ScoringError::NonFinite("fused input"));
    }
    if beta < 0.0 {
        return Err(ConfigError::OutOfRange {
            name: "beta",
            value: beta,
            min: 0.0,
            max: f64::INFINITY,
        }
        .into());
    }
    Ok(l_lang + beta * l_disclip)
}

/// Scores every candidate of one step. `text_embs[i]` is the encoding of the
/// text extended by `candidates[i]`.
pub fn score_candidates(
    candidates: &[Candidate],
    text_embs: &[Embedding],
    target: &RegionRepresentation,
    distractors: &[RegionRepresentation],
    previous_hiddens: &[Embedding],
    hyper: &Hyperparameters,
) -> Result<Vec<CandidateScore>, ScoringError> {
    if candidates.len() != text_embs.len() {
        return Err(ScoringError::LengthMismatch {
            candidates: candidates.len(),
            texts: text_embs.len(),
        });
    }
    if candidates.is_empty() {
        return Err(ScoringError::Empty);
    }
    let (delta, mode) = (hyper.delta(), hyper.sim_mode());
    let per_region = |rep: &RegionRepresentation| -> Result<Vec<f64>, ScoringError> {
        let raw = text_embs
            .iter()
            .map(|t| region_similarity(t, rep, delta, mode))
            .collect::<Result<Vec<_>, _>>()?;
        match hyper.norm_mode() {
            NormMode::Raw => Ok(raw),
            NormMode::Softmax => candidate_distribution(&raw),
        }
    };

    let s_plus = per_region(target)?;
    let s_minus: Vec<Vec<f64>> = distractors.iter().map(per_region).collect::<Result<_, _>>()?;

    let mut scores = Vec::with_capacity(candidates.len());
    let mut negatives = Vec::with_capacity(distractors.len());
    for (i, cand) in candidates.iter().enumerate() {
        negatives.clear();
        negatives.extend(s_minus.iter().map(|col| col[i]));
        let l_disclip = disclip_score(s_plus[i], &negatives, hyper.lambda())?;
        let degen_penalty = degeneration_penalty(&cand.hidden, previous_hiddens)?;
        let l_lang = combine_language(cand.p_model, degen_penalty, hyper.alpha());
        scores.push(CandidateScore {
            token: cand.token,
            p_model: cand.p_model,
            s_plus: s_plus[i],
            s_minus_mean: mean(&negatives),
            l_disclip,
            degen_penalty,
            l_lang,
            fused: fused_score(l_lang, l_disclip, hyper.beta())?,
        });
    }
    Ok(scores)
}

/// Index of the highest fused score; equal scores go to the lowest token id.
pub fn argmax_candidate(scores: &[CandidateScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &scores[b];
                if s.fused > cur.fused || (s.fused == cur.fused && s.token < cur.token) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}
