//! Command implementations behind the `refexp` binary: generation over scene
//! files, listener evaluation, δ/λ sweeps, dataset conversion and the
//! representation ablation.

pub mod ablation;
pub mod backend;
pub mod convert;
pub mod evaluate;
pub mod generate;
pub mod scenes;
pub mod sweep;
pub mod toy;

use std::sync::Mutex;

use anyhow::Result;
use rayon::prelude::*;

use crate::backend::{Backend, BackendSpec};

/// Applies `f` to every item on `workers` threads and returns the results in
/// input order. Backend handles are pooled: at most one per concurrently
/// running worker is opened, and the first is opened up front so an
/// unreachable backend fails the whole run instead of every item.
pub fn run_parallel<T, R, F>(items: &[T], workers: usize, spec: &BackendSpec, f: F) -> Result<Vec<Result<R>>>
where
    T: Sync,
    R: Send,
    F: Fn(&Backend, &T) -> Result<R> + Sync,
{
    let pool = Mutex::new(vec![spec.connect()?]);
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()?;
    Ok(threads.install(|| {
        items
            .par_iter()
            .map(|item| {
                let checked_out = pool.lock().expect("pool lock").pop();
                let backend = match checked_out {
                    Some(b) => b,
                    None => spec.connect()?,
                };
                let out = f(&backend, item);
                pool.lock().expect("pool lock").push(backend);
                out
            })
            .collect()
    }))
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
