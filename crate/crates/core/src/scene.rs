//! Scenes: an image, its labeled regions, and the region to be described.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::Image;

/// Axis-aligned box in pixel coordinates, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self, SceneError> {
        if w == 0 || h == 0 {
            return Err(SceneError::EmptyBox { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    /// Exclusive right edge.
    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    /// Exclusive bottom edge.
    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.right() <= width as u64 && self.bottom() <= height as u64
    }

    /// Errors with the offending edge if the box does not fit a `width`×`height` image.
    pub fn check_bounds(&self, width: u32, height: u32) -> Result<(), SceneError> {
        if self.w == 0 || self.h == 0 {
            return Err(SceneError::EmptyBox { w: self.w, h: self.h });
        }
        if self.fits_within(width, height) {
            Ok(())
        } else {
            Err(SceneError::OutOfBounds {
                bbox: *self,
                width,
                height,
            })
        }
    }

    /// Same box shifted by `(dx, dy)`.
    pub fn translated(&self, dx: u32, dy: u32) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = SceneError;

    fn try_from([x, y, w, h]: [u32; 4]) -> Result<Self, Self::Error> {
        BBox::new(x, y, w, h)
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub id: String,
    pub bbox: BBox,
    /// Synthetic semantics, read only by the toy backend.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub attributes: BTreeSet<String>,
}

impl Region {
    pub fn new(id: impl Into<String>, bbox: BBox) -> Self {
        Self {
            id: id.into(),
            bbox,
            attributes: BTreeSet::new(),
        }
    }

    pub fn with_attributes<I, S>(mut self, attributes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.attributes = attributes.into_iter().map(Into::into).collect();
        self
    }
}

/// The unit of generation and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub regions: Vec<Region>,
    pub target_id: String,
    pub ground_truth: Vec<String>,
}

impl Scene {
    /// Builds and validates a scene against its own image dimensions.
    pub fn new(
        image: Image,
        regions: Vec<Region>,
        target_id: impl Into<String>,
    ) -> Result<Self, SceneError> {
        let (w, h) = (image.width(), image.height());
        validate_scene(
            Scene {
                image,
                regions,
                target_id: target_id.into(),
                ground_truth: Vec::new(),
            },
            w,
            h,
        )
    }

    pub fn with_ground_truth(mut self, expressions: Vec<String>) -> Self {
        self.ground_truth = expressions;
        self
    }

    pub fn target_index(&self) -> Option<usize> {
        self.regions.iter().position(|r| r.id == self.target_id)
    }

    pub fn target(&self) -> Option<&Region> {
        self.target_index().map(|i| &self.regions[i])
    }

    /// All regions except the target, in scene order.
    pub fn distractors(&self) -> impl Iterator<Item = &Region> {
        self.regions.iter().filter(move |r| r.id != self.target_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SceneError {
    #[error("scene has no regions")]
    NoRegions,
    #[error("duplicate region id `{0}`")]
    DuplicateRegionId(String),
    #[error("target not found: no region with id `{0}`")]
    TargetNotFound(String),
    #[error("bbox must have positive size, got {w}x{h}")]
    EmptyBox { w: u32, h: u32 },
    #[error("bbox {bbox:?} exceeds image bounds {width}x{height}")]
    OutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("region `{id}`: {source}")]
    Region {
        id: String,
        #[source]
        source: Box<SceneError>,
    },
    #[error("image is {actual_w}x{actual_h} but scene declares {declared_w}x{declared_h}")]
    ImageSize {
        declared_w: u32,
        declared_h: u32,
        actual_w: u32,
        actual_h: u32,
    },
}

/// Checks every scene invariant against an image of `image_w`×`image_h` pixels
/// and hands the scene back untouched.
pub fn validate_scene(scene: Scene, image_w: u32, image_h: u32) -> Result<Scene, SceneError> {
    if scene.image.width() != image_w || scene.image.height() != image_h {
        return Err(SceneError::ImageSize {
            declared_w: image_w,
            declared_h: image_h,
            actual_w: scene.image.width(),
            actual_h: scene.image.height(),
        });
    }
    if scene.regions.is_empty() {
        return Err(SceneError::NoRegions);
    }
    let mut seen = HashSet::with_capacity(scene.regions.len());
    for region in &scene.regions {
        if !seen.insert(region.id.as_str()) {
            return Err(SceneError::DuplicateRegionId(region.id.clone()));
        }
        region
            .bbox
            .check_bounds(image_w, image_h)
            .map_err(|e| SceneError::Region {
                id: region.id.clone(),
                source: Box::new(e),
            })?;
    }
    if !seen.contains(scene.target_id.as_str()) {
        return Err(SceneError::TargetNotFound(scene.target_id.clone()));
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blank(w: u32, h: u32) -> Image {
        Image::filled(w, h, [0, 0, 0]).unwrap()
    }

    fn bbox(x: u32, y: u32, w: u32, h: u32) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn minimal_scene_is_valid() {
        let scene = Scene::new(blank(10, 10), vec![Region::new("a", bbox(1, 1, 4, 4))], "a");
        assert!(scene.is_ok());
        let scene = scene.unwrap();
        assert_eq!(scene.distractors().count(), 0);
        assert_eq!(scene.target_index(), Some(0));
    }

    #[test]
    fn missing_target_is_rejected() {
        let err = Scene::new(blank(10, 10), vec![Region::new("a", bbox(0, 0, 2, 2))], "b")
            .unwrap_err();
        assert_eq!(err, SceneError::TargetNotFound("b".into()));
        assert!(err.to_string().contains("target not found"));
    }

    #[test]
    fn bbox_one_pixel_too_wide_is_out_of_bounds() {
        let err = Scene::new(blank(10, 10), vec![Region::new("a", bbox(3, 0, 8, 2))], "a")
            .unwrap_err();
        match err {
            SceneError::Region { id, source } => {
                assert_eq!(id, "a");
                assert!(matches!(*source, SceneError::OutOfBounds { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
        // exactly touching the right edge is fine
        assert!(Scene::new(blank(10, 10), vec![Region::new("a", bbox(2, 0, 8, 2))], "a").is_ok());
    }

    #[test]
    fn zero_width_box_is_rejected() {
        assert_eq!(BBox::new(0, 0, 0, 3), Err(SceneError::EmptyBox { w: 0, h: 3 }));
        let parsed: Result<BBox, _> = serde_json::from_str("[0, 0, 0, 3]");
        assert!(parsed.is_err());
    }

    #[test]
    fn duplicate_ids_and_empty_scene() {
        let regions = vec![
            Region::new("a", bbox(0, 0, 2, 2)),
            Region::new("a", bbox(2, 2, 2, 2)),
        ];
        assert_eq!(
            Scene::new(blank(8, 8), regions, "a").unwrap_err(),
            SceneError::DuplicateRegionId("a".into())
        );
        assert_eq!(
            Scene::new(blank(8, 8), vec![], "a").unwrap_err(),
            SceneError::NoRegions
        );
    }

    #[test]
    fn declared_size_must_match_image() {
        let scene = Scene {
            image: blank(8, 8),
            regions: vec![Region::new("a", bbox(0, 0, 2, 2))],
            target_id: "a".into(),
            ground_truth: vec![],
        };
        assert!(matches!(
            validate_scene(scene, 9, 8),
            Err(SceneError::ImageSize { .. })
        ));
    }

    #[test]
    fn bbox_serializes_as_array() {
        let b = bbox(1, 2, 3, 4);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
        let back: BBox = serde_json::from_str("[1,2,3,4]").unwrap();
        assert_eq!(back, b);
    }

    proptest! {
        #[test]
        fn validation_is_idempotent_and_order_preserving(
            boxes in prop::collection::vec((0u32..20, 0u32..20, 1u32..12, 1u32..12), 1..6),
            target in 0usize..6,
        ) {
            let regions: Vec<Region> = boxes
                .iter()
                .enumerate()
                .map(|(i, &(x, y, w, h))| Region::new(format!("r{i}"), bbox(x, y, w, h)))
                .collect();
            let target_id = format!("r{}", target % regions.len());
            let scene = Scene {
                image: blank(32, 32),
                regions: regions.clone(),
                target_id,
                ground_truth: vec![],
            };
            let once = validate_scene(scene, 32, 32).unwrap();
            let ids: Vec<_> = once.regions.iter().map(|r| r.id.clone()).collect();
            let expected: Vec<_> = regions.iter().map(|r| r.id.clone()).collect();
            prop_assert_eq!(ids, expected);
            let twice = validate_scene(once.clone(), 32, 32).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
