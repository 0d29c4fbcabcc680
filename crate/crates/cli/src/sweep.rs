//! δ/λ grid search: generate on a seeded subset of scenes for every cell and
//! score the results with the similarity listener.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refexp_core::{generate, Hyperparameters, SceneEmbeddings, SimMode};
use serde::{Deserialize, Serialize};

use crate::backend::BackendSpec;
use crate::evaluate::listen;
use crate::generate::{prepare_scene, GenerateOptions};
use crate::run_parallel;
use crate::scenes::SceneEntry;

pub const DEFAULT_SAMPLE_COUNT: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub delta_values: Vec<f64>,
    pub lambda_values: Vec<f64>,
    pub sample_count: usize,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, values) in [("delta", &self.delta_values), ("lambda", &self.lambda_values)] {
            if values.is_empty() {
                bail!("no {name} values in the grid");
            }
            if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                bail!("{name} value {v} outside [0, 1]");
            }
        }
        if self.sample_count == 0 {
            bail!("sample count must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub grid: SweepGrid,
    /// Everything except δ and λ, which each cell overrides.
    pub base: GenerateOptions,
    pub listener_delta: f64,
    pub sim_mode: SimMode,
    pub seed: u64,
}

/// One CSV row. A failed cell has no accuracy and `n = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub lambda: f64,
    pub accuracy: Option<f64>,
    pub n: usize,
}

/// Indices of the scenes a sweep runs on, in input order. All scenes are
/// used when there are no more than `count`.
pub fn sample_indices(total: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= total {
        return (0..total).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, total, count).into_vec();
    picked.sort_unstable();
    picked
}

pub fn run_sweep(entries: &[SceneEntry], spec: &BackendSpec, opts: &SweepOptions) -> Result<Vec<SweepRow>> {
    opts.grid.validate()?;
    let mut cells: Vec<(f64, f64, Hyperparameters)> = Vec::new();
    for &delta in &opts.grid.delta_values {
        for &lambda in &opts.grid.lambda_values {
            let hyper = opts.base.hyper.to_builder().delta(delta).lambda(lambda).build()?;
            cells.push((delta, lambda, hyper));
        }
    }
    if entries.is_empty() {
        bail!("no scenes to sweep over");
    }

    let subset: Vec<&SceneEntry> = sample_indices(entries.len(), opts.grid.sample_count, opts.seed)
        .into_iter()
        .map(|i| &entries[i])
        .collect();
    // region embeddings do not depend on δ or λ, so they are shared by all cells
    let prepared: Vec<Result<SceneEmbeddings>> =
        run_parallel(&subset, opts.base.workers, spec, |backend, entry| {
            prepare_scene(backend, entry, &opts.base.imaging)
        })?;
    let ready: Vec<(&SceneEntry, SceneEmbeddings)> = match subset
        .iter()
        .zip(prepared)
        .map(|(entry, embs)| embs.map(|e| (*entry, e)).with_context(|| format!("scene {}", entry.id)))
        .collect::<Result<Vec<_>>>()
    {
        Ok(ready) => ready,
        Err(e) => {
            log::error!("{e:#}; every cell fails");
            return Ok(cells
                .into_iter()
                .map(|(delta, lambda, _)| SweepRow {
                    delta,
                    lambda,
                    accuracy: None,
                    n: 0,
                })
                .collect());
        }
    };

    let mut rows = Vec::with_capacity(cells.len());
    for (delta, lambda, hyper) in cells {
        let outcomes = run_parallel(&ready, opts.base.workers, spec, |backend, (entry, embs)| {
            let result = generate(embs, backend.lm.as_ref(), backend.encoder.as_ref(), &opts.base.prompt, &hyper)?;
            listen(
                entry,
                embs,
                backend.encoder.as_ref(),
                &result.expression,
                opts.listener_delta,
                opts.sim_mode,
            )
        })?;
        let row = match outcomes.into_iter().collect::<Result<Vec<_>>>() {
            Ok(outcomes) => {
                let hits = outcomes.iter().filter(|o| o.correct).count();
                SweepRow {
                    delta,
                    lambda,
                    accuracy: Some(hits as f64 / outcomes.len() as f64),
                    n: outcomes.len(),
                }
            }
            Err(e) => {
                log::error!("cell delta={delta} lambda={lambda} failed: {e:#}");
                SweepRow {
                    delta,
                    lambda,
                    accuracy: None,
                    n: 0,
                }
            }
        };
        log::info!("delta={delta} lambda={lambda} accuracy={:?}", row.accuracy);
        rows.push(row);
    }
    Ok(rows)
}

/// Writes `delta,lambda,accuracy,n` CSV.
pub fn write_sweep_csv(writer: impl Write, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header = r.headers()?.clone();
    if header != vec!["delta", "lambda", "accuracy", "n"] {
        bail!("{}: expected header delta,lambda,accuracy,n", path.display());
    }
    r.deserialize()
        .collect::<Result<Vec<SweepRow>, _>>()
        .with_context(|| format!("invalid sweep CSV {}", path.display()))
}

/// The cell with the highest accuracy; the earliest row wins ties.
pub fn best_cell(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter()
        .filter(|r| r.accuracy.is_some())
        .fold(None, |best: Option<&SweepRow>, r| match best {
            Some(b) if b.accuracy >= r.accuracy => Some(b),
            _ => Some(r),
        })
}
