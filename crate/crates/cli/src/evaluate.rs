//! Listener accuracy, caption metrics and vocabulary statistics for a set of
//! generated expressions.

use std::collections::{HashMap, HashSet};

use anyhow::{anyhow, bail, Result};
use refexp_core::eval::{
    bleu_n, clip_listener, corpus_bleu, diversity_stats, iou, normalize, rouge_l_multi, CiderScorer,
};
use refexp_core::{Encoder, ImagingConfig, SceneEmbeddings, SimMode};
use serde::{Deserialize, Serialize};

use crate::backend::BackendSpec;
use crate::generate::{prepare_scene, GenerationRecord};
use crate::run_parallel;
use crate::scenes::SceneEntry;

pub const IOU_THRESHOLD: f64 = 0.5;
const TOP_WORDS: usize = 10;

#[derive(Debug, Clone)]
pub struct EvaluateOptions {
    pub imaging: ImagingConfig,
    /// Crop/blur mix used by the listener.
    pub listener_delta: f64,
    pub sim_mode: SimMode,
    pub workers: usize,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self {
            imaging: ImagingConfig::default(),
            listener_delta: 0.5,
            sim_mode: SimMode::Cosine,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub scene_id: String,
    pub expression: String,
    pub predicted_region_id: String,
    pub target_id: String,
    pub iou: f64,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu4: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cider: Option<f64>,
}

/// Caption metrics are `None` when no evaluated scene has ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub listener_accuracy: Option<f64>,
    pub bleu1: Option<f64>,
    pub bleu4: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
    pub vocab_size: usize,
    pub novel_fraction: f64,
    pub top_words: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluationRecord {
    Example(ExampleResult),
    Error { scene_id: String, error: String },
    Summary(Summary),
}

/// Listener outcome for one expression in one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ListenerOutcome {
    pub predicted_region_id: String,
    pub iou: f64,
    pub correct: bool,
}

/// Runs the similarity listener over precomputed region embeddings and
/// scores the chosen box against the target box.
pub fn listen(
    entry: &SceneEntry,
    embs: &SceneEmbeddings,
    encoder: &dyn Encoder,
    expression: &str,
    delta: f64,
    mode: SimMode,
) -> Result<ListenerOutcome> {
    let pred = clip_listener(expression, embs, encoder, delta, mode)?;
    let bbox_of = |id: &str| {
        entry
            .file
            .regions
            .iter()
            .find(|r| r.id == id)
            .map(|r| r.bbox)
            .ok_or_else(|| anyhow!("scene {} has no region `{id}`", entry.id))
    };
    let target = bbox_of(&entry.file.target_id)?;
    let overlap = iou(bbox_of(&pred.predicted_region_id)?, target);
    Ok(ListenerOutcome {
        predicted_region_id: pred.predicted_region_id,
        iou: overlap,
        correct: overlap >= IOU_THRESHOLD,
    })
}

fn sentence_metric(f: impl FnOnce() -> Result<f64, refexp_core::eval::EvalError>, empty: bool) -> f64 {
    // an expression with no words matches nothing
    if empty {
        0.0
    } else {
        f().unwrap_or(0.0)
    }
}

/// Joins expressions to scenes by id and evaluates them. Returns the
/// per-example and error records followed by one summary record.
pub fn run_evaluate(
    expressions: &[GenerationRecord],
    entries: &[SceneEntry],
    spec: &BackendSpec,
    opts: &EvaluateOptions,
) -> Result<Vec<EvaluationRecord>> {
    if expressions.is_empty() {
        bail!("no expressions to evaluate");
    }
    let by_id: HashMap<&str, &SceneEntry> = entries.iter().map(|e| (e.id.as_str(), e)).collect();

    let mut seen = HashSet::new();
    let jobs: Vec<Result<(&SceneEntry, &str)>> = expressions
        .iter()
        .map(|rec| {
            if !seen.insert(rec.scene_id.as_str()) {
                bail!("duplicate expression for scene");
            }
            if let Some(err) = &rec.error {
                bail!("generation failed: {err}");
            }
            let expr = rec.expression.as_deref().ok_or_else(|| anyhow!("record has no expression"))?;
            let entry = by_id
                .get(rec.scene_id.as_str())
                .ok_or_else(|| anyhow!("no scene with this id"))?;
            Ok((*entry, expr))
        })
        .collect();

    let outcomes = run_parallel(&jobs, opts.workers, spec, |backend, job| {
        let (entry, expr) = job.as_ref().map_err(|e| anyhow!("{e:#}"))?;
        let embs = prepare_scene(backend, entry, &opts.imaging)?;
        listen(entry, &embs, backend.encoder.as_ref(), expr, opts.listener_delta, opts.sim_mode)
    })?;

    // one slot per input record, in input order: an example index or an error
    let mut slots: Vec<Result<usize, EvaluationRecord>> = Vec::with_capacity(expressions.len());
    let mut examples: Vec<ExampleResult> = Vec::new();
    let mut cands: Vec<Vec<String>> = Vec::new();
    let mut refs: Vec<Vec<Vec<String>>> = Vec::new();
    let mut with_refs: Vec<usize> = Vec::new();
    for ((rec, job), outcome) in expressions.iter().zip(&jobs).zip(outcomes) {
        let (entry, expr, outcome) = match (job, outcome) {
            (Ok((entry, expr)), Ok(outcome)) => (entry, expr, outcome),
            (_, Err(e)) => {
                slots.push(Err(EvaluationRecord::Error {
                    scene_id: rec.scene_id.clone(),
                    error: format!("{e:#}"),
                }));
                continue;
            }
            (Err(_), Ok(_)) => unreachable!("failed joins never reach the listener"),
        };
        let mut ex = ExampleResult {
            scene_id: entry.id.clone(),
            expression: expr.to_string(),
            predicted_region_id: outcome.predicted_region_id,
            target_id: entry.file.target_id.clone(),
            iou: outcome.iou,
            correct: outcome.correct,
            bleu1: None,
            bleu4: None,
            rouge_l: None,
            cider: None,
        };
        let gt: Vec<Vec<String>> = entry
            .file
            .ground_truth
            .iter()
            .map(|g| normalize(g))
            .filter(|g| !g.is_empty())
            .collect();
        if !gt.is_empty() {
            let cand = normalize(expr);
            let empty = cand.is_empty();
            ex.bleu1 = Some(sentence_metric(|| bleu_n(&cand, &gt, 1), empty));
            ex.bleu4 = Some(sentence_metric(|| bleu_n(&cand, &gt, 4), empty));
            ex.rouge_l = Some(sentence_metric(|| rouge_l_multi(&cand, &gt), empty));
            with_refs.push(examples.len());
            cands.push(cand);
            refs.push(gt);
        }
        slots.push(Ok(examples.len()));
        examples.push(ex);
    }

    let mut summary = Summary {
        n: examples.len(),
        listener_accuracy: None,
        bleu1: None,
        bleu4: None,
        rouge_l: None,
        cider: None,
        vocab_size: 0,
        novel_fraction: 1.0,
        top_words: Vec::new(),
    };
    if !examples.is_empty() {
        let hits = examples.iter().filter(|e| e.correct).count();
        summary.listener_accuracy = Some(hits as f64 / examples.len() as f64);
    }
    if !with_refs.is_empty() {
        summary.bleu1 = Some(corpus_bleu(&cands, &refs, 1)?);
        summary.bleu4 = Some(corpus_bleu(&cands, &refs, 4)?);
        let rouge: f64 = with_refs.iter().filter_map(|&i| examples[i].rouge_l).sum();
        summary.rouge_l = Some(rouge / with_refs.len() as f64);
        let scorer = CiderScorer::new(&refs)?;
        let mut total = 0.0;
        for ((&i, cand), r) in with_refs.iter().zip(&cands).zip(&refs) {
            let score = scorer.score(cand, r)?;
            examples[i].cider = Some(score);
            total += score;
        }
        summary.cider = Some(total / with_refs.len() as f64);
    }
    let exprs: Vec<String> = examples.iter().map(|e| e.expression.clone()).collect();
    let gt_all: Vec<String> = examples
        .iter()
        .flat_map(|e| by_id[e.scene_id.as_str()].file.ground_truth.clone())
        .collect();
    let diversity = diversity_stats(&exprs, (!gt_all.is_empty()).then_some(&gt_all[..]));
    summary.vocab_size = diversity.vocab_size;
    summary.novel_fraction = diversity.novel_fraction;
    summary.top_words = diversity.top_words.into_iter().take(TOP_WORDS).collect();

    let mut out: Vec<EvaluationRecord> = slots
        .into_iter()
        .map(|slot| match slot {
            Ok(i) => EvaluationRecord::Example(examples[i].clone()),
            Err(record) => record,
        })
        .collect();
    out.push(EvaluationRecord::Summary(summary));
    Ok(out)
}
