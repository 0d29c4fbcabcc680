use anyhow::Result;
use refexp_core::{
    generate, precompute_scene_embeddings, GenerationResult, Hyperparameters, ImagingConfig,
    SceneEmbeddings, StepTrace, StopReason, TokenId,
};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendSpec};
use crate::run_parallel;
use crate::scenes::SceneEntry;

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub hyper: Hyperparameters,
    pub imaging: ImagingConfig,
    pub prompt: String,
    pub trace: bool,
    pub workers: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            hyper: Hyperparameters::default(),
            imaging: ImagingConfig::default(),
            prompt: "A photo of".into(),
            trace: false,
            workers: 1,
        }
    }
}

/// One output line of `generate`: either an expression or an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub scene_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<StepTrace>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl GenerationRecord {
    pub fn success(scene_id: &str, result: GenerationResult, trace: bool) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            expression: Some(result.expression),
            stop_reason: Some(result.stop_reason),
            tokens: trace.then_some(result.tokens),
            trace: trace.then_some(result.trace),
            error: None,
        }
    }

    pub fn failure(scene_id: &str, error: &anyhow::Error) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            expression: None,
            stop_reason: None,
            tokens: None,
            trace: None,
            error: Some(format!("{error:#}")),
        }
    }

    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }
}

/// Loads the scene image and encodes every region.
pub fn prepare_scene(backend: &Backend, entry: &SceneEntry, imaging: &ImagingConfig) -> Result<SceneEmbeddings> {
    let scene = entry.load()?;
    Ok(precompute_scene_embeddings(&scene, backend.encoder.as_ref(), imaging)?)
}

pub fn generate_scene(backend: &Backend, entry: &SceneEntry, opts: &GenerateOptions) -> Result<GenerationResult> {
    let embs = prepare_scene(backend, entry, &opts.imaging)?;
    Ok(generate(
        &embs,
        backend.lm.as_ref(),
        backend.encoder.as_ref(),
        &opts.prompt,
        &opts.hyper,
    )?)
}

/// Generates for every scene; per-scene failures become error records.
pub fn run_generate(entries: &[SceneEntry], spec: &BackendSpec, opts: &GenerateOptions) -> Result<Vec<GenerationRecord>> {
    let results = run_parallel(entries, opts.workers, spec, |backend, entry| {
        generate_scene(backend, entry, opts)
    })?;
    Ok(entries
        .iter()
        .zip(results)
        .map(|(entry, result)| match result {
            Ok(r) => GenerationRecord::success(&entry.id, r, opts.trace),
            Err(e) => {
                log::warn!("scene {}: {e:#}", entry.id);
                GenerationRecord::failure(&entry.id, &e)
            }
        })
        .collect())
}
