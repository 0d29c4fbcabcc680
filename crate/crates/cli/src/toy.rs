//! Synthetic scene sets for the toy backend, written as ordinary scene files
//! so every command can run on them.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refexp_core::backends::toy::ToyWorld;
use refexp_core::{Region, Scene};

use crate::scenes::{save_png, write_jsonl, SceneFile};

pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
pub const SHAPES: [&str; 3] = ["ball", "cube", "cone"];
pub const SIZES: [&str; 2] = ["small", "large"];

/// Attribute sets of one toy scene, left to right, and which one is the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToySceneSpec {
    pub regions: Vec<BTreeSet<String>>,
    pub target: usize,
    pub ground_truth: Vec<String>,
}

pub fn region_id(index: usize) -> String {
    format!("r{index}")
}

fn words(ws: &[&str]) -> BTreeSet<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

impl ToySceneSpec {
    fn render(&self, world: &ToyWorld) -> Result<(refexp_core::Image, Vec<Region>)> {
        ensure!(self.target < self.regions.len(), "target index out of range");
        let (image, boxes) = world.render(&self.regions)?;
        let regions = self
            .regions
            .iter()
            .zip(boxes)
            .enumerate()
            .map(|(i, (attrs, b))| Region::new(region_id(i), b).with_attributes(attrs.iter().cloned()))
            .collect();
        Ok((image, regions))
    }

    pub fn build(&self, world: &ToyWorld) -> Result<Scene> {
        let (image, regions) = self.render(world)?;
        Ok(Scene::new(image, regions, region_id(self.target))?.with_ground_truth(self.ground_truth.clone()))
    }
}

/// Writes one PNG per scene plus `<name>.jsonl` into `dir` and returns the
/// path of the JSON-lines file. Scene ids are `<name>-000`, `<name>-001`, ...
pub fn write_scene_set(dir: &Path, name: &str, world: &ToyWorld, specs: &[ToySceneSpec]) -> Result<PathBuf> {
    let mut files = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let id = format!("{name}-{i:03}");
        let (image, regions) = spec.render(world)?;
        let image_name = format!("{id}.png");
        save_png(&image, &dir.join(&image_name))?;
        files.push(SceneFile {
            id: Some(id),
            image: image_name.into(),
            width: image.width(),
            height: image.height(),
            regions,
            target_id: region_id(spec.target),
            ground_truth: spec.ground_truth.clone(),
        });
    }
    let path = dir.join(format!("{name}.jsonl"));
    write_jsonl(File::create(&path)?, &files)?;
    Ok(path)
}

/// Two-object scenes over the default vocabulary where target and distractor
/// have a size, a color and a shape and differ in exactly one of them. The
/// differing category cycles color, shape, size; the target's position is
/// random.
pub fn adversarial_specs(n: usize, seed: u64) -> Vec<ToySceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let target = [
                *SIZES.choose(&mut rng).expect("non-empty"),
                *COLORS.choose(&mut rng).expect("non-empty"),
                *SHAPES.choose(&mut rng).expect("non-empty"),
            ];
            let mut other = target;
            let slot = [1, 2, 0][i % 3];
            let pool: &[&str] = match slot {
                0 => &SIZES,
                1 => &COLORS,
                _ => &SHAPES,
            };
            while other[slot] == target[slot] {
                other[slot] = pool.choose(&mut rng).expect("non-empty");
            }
            let ground_truth = vec![target.join(" ")];
            let (t, d) = (words(&target), words(&other));
            if rng.gen_bool(0.5) {
                ToySceneSpec {
                    regions: vec![t, d],
                    target: 0,
                    ground_truth,
                }
            } else {
                ToySceneSpec {
                    regions: vec![d, t],
                    target: 1,
                    ground_truth,
                }
            }
        })
        .collect()
}

/// Scenes with 1..=`max_regions` regions, each holding one to three random
/// attributes of `world`, and a random target.
pub fn random_specs(world: &ToyWorld, n: usize, max_regions: usize, seed: u64) -> Vec<ToySceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attrs = world.attributes();
    (0..n)
        .map(|_| {
            let count = rng.gen_range(1..=max_regions.max(1));
            let regions: Vec<BTreeSet<String>> = (0..count)
                .map(|_| {
                    let k = rng.gen_range(1..=3.min(attrs.len()));
                    attrs.choose_multiple(&mut rng, k).cloned().collect()
                })
                .collect();
            let target = rng.gen_range(0..count);
            let ground_truth = vec![regions[target].iter().cloned().collect::<Vec<_>>().join(" ")];
            ToySceneSpec {
                regions,
                target,
                ground_truth,
            }
        })
        .collect()
}
