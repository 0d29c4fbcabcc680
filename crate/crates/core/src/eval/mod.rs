//! Comprehension-side evaluation: a similarity listener, box overlap and
//! accuracy at an IoU threshold. Text metrics live in [`text`].

pub mod text;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Encoder};
use crate::decoding::SceneEmbeddings;
use crate::hyper::SimMode;
use crate::scene::BBox;
use crate::scoring::{region_similarity, ScoringError};

pub use text::{
    bleu_n, cider, corpus_bleu, diversity_stats, normalize, rouge_l, rouge_l_multi, CiderScorer,
    DiversityStats,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("encoder failed: {0}")]
    Encoder(#[from] BackendError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListenerPrediction {
    pub predicted_region_id: String,
    /// `(region id, score)` in scene order.
    pub scores: Vec<(String, f64)>,
}

impl ListenerPrediction {
    /// Picks the highest score; ties go to the region listed first.
    pub fn from_scores(scores: Vec<(String, f64)>) -> Option<Self> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &(_, s)) in scores.iter().enumerate() {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let (i, _) = best?;
        Some(Self {
            predicted_region_id: scores[i].0.clone(),
            scores,
        })
    }
}

/// Resolves an expression to the region whose crop/blur mix is most similar.
pub fn clip_listener(
    expression: &str,
    scene: &SceneEmbeddings,
    encoder: &dyn Encoder,
    delta: f64,
    mode: SimMode,
) -> Result<ListenerPrediction, EvalError> {
    let text = encoder.encode_text(expression)?;
    let scores = scene
        .regions()
        .into_iter()
        .map(|(id, rep)| Ok((id.to_string(), region_similarity(&text, rep, delta, mode)?)))
        .collect::<Result<Vec<_>, ScoringError>>()?;
    ListenerPrediction::from_scores(scores).ok_or(EvalError::Empty("scene"))
}

/// Intersection over union of two pixel boxes.
pub fn iou(a: BBox, b: BBox) -> f64 {
    let iw = a.right().min(b.right()).saturating_sub(u64::from(a.x.max(b.x)));
    let ih = a.bottom().min(b.bottom()).saturating_sub(u64::from(a.y.max(b.y)));
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Fraction of `(predicted, ground truth)` pairs with IoU at least `threshold`.
pub fn rec_accuracy(pairs: &[(BBox, BBox)], threshold: f64) -> Result<f64, EvalError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(EvalError::Threshold(threshold));
    }
    if pairs.is_empty() {
        return Err(EvalError::Empty("prediction list"));
    }
    let hits = pairs.iter().filter(|(p, g)| iou(*p, *g) >= threshold).count();
    Ok(hits as f64 / pairs.len() as f64)
}
