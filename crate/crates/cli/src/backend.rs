//! Turning the `--backend` argument into a language model and encoder.

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use refexp_core::backends::protocol::RemoteBackend;
use refexp_core::backends::toy::{ToyEncoder, ToyLm, ToyTable, ToyWorld};
use refexp_core::{Encoder, LanguageModel};

/// Next-token table of the built-in toy model, as given on the command line:
/// `uniform` or `seeded:<u64>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyLmKind {
    Uniform,
    Seeded(u64),
}

impl FromStr for ToyLmKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "uniform" => Ok(ToyLmKind::Uniform),
            Some(("seeded", seed)) => seed
                .parse()
                .map(ToyLmKind::Seeded)
                .map_err(|e| format!("bad seed `{seed}`: {e}")),
            _ => Err(format!("expected `uniform` or `seeded:<n>`, got `{s}`")),
        }
    }
}

impl From<ToyLmKind> for ToyTable {
    fn from(kind: ToyLmKind) -> Self {
        match kind {
            ToyLmKind::Uniform => ToyTable::Uniform,
            ToyLmKind::Seeded(s) => ToyTable::Seeded(s),
        }
    }
}

/// Where models come from. Cheap to clone; [`BackendSpec::connect`] opens a
/// fresh handle, which for remote endpoints is a new connection.
#[derive(Debug, Clone)]
pub enum BackendSpec {
    Toy { world: Arc<ToyWorld>, lm: ToyLmKind },
    Remote(String),
}

#[derive(Clone)]
pub struct Backend {
    pub lm: Arc<dyn LanguageModel>,
    pub encoder: Arc<dyn Encoder>,
}

impl BackendSpec {
    /// `toy`, `tcp://host:port`, `host:port` or `exec:<command>`. The toy
    /// world comes from `toy_world` (JSON `{attributes, fillers}`) or the
    /// default vocabulary.
    pub fn parse(backend: &str, toy_world: Option<&Path>, toy_lm: ToyLmKind) -> Result<Self> {
        if backend == "toy" {
            let world = match toy_world {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("cannot read {}", path.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("invalid toy world {}", path.display()))?
                }
                None => ToyWorld::default(),
            };
            return Ok(BackendSpec::Toy {
                world: Arc::new(world),
                lm: toy_lm,
            });
        }
        if toy_world.is_some() {
            bail!("--toy-world only applies to the toy backend");
        }
        if backend.is_empty() {
            bail!("empty backend endpoint");
        }
        Ok(BackendSpec::Remote(backend.to_string()))
    }

    pub fn toy(world: ToyWorld, lm: ToyLmKind) -> Self {
        BackendSpec::Toy {
            world: Arc::new(world),
            lm,
        }
    }

    pub fn connect(&self) -> Result<Backend> {
        match self {
            BackendSpec::Toy { world, lm } => Ok(Backend {
                lm: Arc::new(ToyLm::new(world.clone(), (*lm).into())),
                encoder: Arc::new(ToyEncoder::new(world.clone())),
            }),
            BackendSpec::Remote(endpoint) => {
                let remote = Arc::new(
                    RemoteBackend::connect(endpoint)
                        .with_context(|| format!("cannot reach backend `{endpoint}`"))?,
                );
                Ok(Backend {
                    lm: remote.clone(),
                    encoder: remote,
                })
            }
        }
    }
}
