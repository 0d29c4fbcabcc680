//! Region-representation ablation: the same scenes decoded with each way of
//! turning a box into image embeddings, scored by a fixed listener.

use std::fmt;

use anyhow::Result;
use refexp_core::eval::{clip_listener, iou};
use refexp_core::{
    generate, precompute_scene_embeddings, Hyperparameters, ImagingConfig, RepresentationMode, Scene, SimMode,
};

use crate::backend::Backend;
use crate::evaluate::IOU_THRESHOLD;

/// Listener accuracy per representation (rows) and scene set (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub rows: Vec<(RepresentationMode, Vec<f64>)>,
}

impl AblationTable {
    pub fn get(&self, mode: RepresentationMode, column: &str) -> Option<f64> {
        let col = self.columns.iter().position(|c| c == column)?;
        self.rows.iter().find(|(m, _)| *m == mode).map(|(_, accs)| accs[col])
    }
}

impl fmt::Display for AblationTable {
    /// Markdown table with accuracies in percent.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "| representation |")?;
        for c in &self.columns {
            write!(f, " {c} |")?;
        }
        write!(f, "\n|---|")?;
        for _ in &self.columns {
            write!(f, "---|")?;
        }
        writeln!(f)?;
        for (mode, accs) in &self.rows {
            write!(f, "| {} |", mode.name())?;
            for a in accs {
                write!(f, " {:.1} |", 100.0 * a)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AblationOptions {
    pub hyper: Hyperparameters,
    /// Base imaging settings; the representation field is overridden per row.
    pub imaging: ImagingConfig,
    pub prompt: String,
    pub listener_delta: f64,
    pub sim_mode: SimMode,
}

fn accuracy(scenes: &[Scene], mode: RepresentationMode, backend: &Backend, opts: &AblationOptions) -> Result<f64> {
    let speaker_cfg = ImagingConfig {
        representation: mode,
        ..opts.imaging.clone()
    };
    let listener_cfg = ImagingConfig {
        representation: RepresentationMode::CropBlur,
        ..opts.imaging.clone()
    };
    let (lm, enc) = (backend.lm.as_ref(), backend.encoder.as_ref());
    let mut hits = 0;
    for scene in scenes {
        let speaker = precompute_scene_embeddings(scene, enc, &speaker_cfg)?;
        let result = generate(&speaker, lm, enc, &opts.prompt, &opts.hyper)?;
        let listener = precompute_scene_embeddings(scene, enc, &listener_cfg)?;
        let pred = clip_listener(&result.expression, &listener, enc, opts.listener_delta, opts.sim_mode)?;
        let bbox = |id: &str| scene.regions.iter().find(|r| r.id == id).map(|r| r.bbox);
        let target = scene.target().map(|r| r.bbox);
        if let (Some(p), Some(t)) = (bbox(&pred.predicted_region_id), target) {
            if iou(p, t) >= IOU_THRESHOLD {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / scenes.len().max(1) as f64)
}

/// Runs every representation mode over every named scene set.
pub fn run_ablation(sets: &[(String, Vec<Scene>)], backend: &Backend, opts: &AblationOptions) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for mode in RepresentationMode::ALL {
        let accs = sets
            .iter()
            .map(|(_, scenes)| accuracy(scenes, mode, backend, opts))
            .collect::<Result<Vec<_>>>()?;
        rows.push((mode, accs));
    }
    Ok(AblationTable {
        columns: sets.iter().map(|(name, _)| name.clone()).collect(),
        rows,
    })
}
