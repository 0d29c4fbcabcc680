//! Converting referring-expression datasets into scene files.
//!
//! Two input layouts are understood. `refcoco_like`:
//!
//! ```json
//! {"images": [{"id": 1, "file_name": "a.jpg", "width": 640, "height": 480}],
//!  "annotations": [{"id": 10, "image_id": 1, "bbox": [x, y, w, h]}],
//!  "refs": [{"ref_id": 5, "ann_id": 10, "sentences": ["the man on the left"]}]}
//! ```
//!
//! A ref may carry `ann_ids` instead of `ann_id` and an optional
//! `"group": true`. `flickr_like`:
//!
//! ```json
//! {"images": [{"file_name": "b.jpg", "width": 500, "height": 375,
//!   "boxes": [{"id": "7", "bbox": [x, y, w, h]}],
//!   "phrases": [{"phrase_id": "p1", "text": "a dog", "box_ids": ["7"]}]}]}
//! ```
//!
//! Every annotated target becomes one scene whose distractors are the other
//! boxes of the same image, with all of its expressions as ground truth.
//! References to several boxes at once (group references) are skipped.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use refexp_core::{BBox, Region};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::scenes::SceneFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    RefcocoLike,
    FlickrLike,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvertSummary {
    pub scenes: usize,
    pub group_refs_skipped: usize,
    /// Phrases or refs without any box.
    pub ungrounded_skipped: usize,
    /// Boxes that are empty once snapped to the pixel grid.
    pub degenerate_boxes_skipped: usize,
}

#[derive(Debug, Deserialize)]
struct RefcocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Debug, Deserialize)]
struct RefcocoAnnotation {
    id: u64,
    image_id: u64,
    bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct RefcocoRef {
    ref_id: u64,
    #[serde(default)]
    ann_id: Option<u64>,
    #[serde(default)]
    ann_ids: Vec<u64>,
    #[serde(default)]
    sentences: Vec<String>,
    #[serde(default)]
    group: bool,
}

#[derive(Debug, Deserialize)]
struct RefcocoDataset {
    images: Vec<RefcocoImage>,
    annotations: Vec<RefcocoAnnotation>,
    refs: Vec<RefcocoRef>,
}

#[derive(Debug, Deserialize)]
struct FlickrBox {
    id: String,
    bbox: [f64; 4],
}

#[derive(Debug, Deserialize)]
struct FlickrPhrase {
    text: String,
    box_ids: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct FlickrImage {
    file_name: String,
    width: u32,
    height: u32,
    boxes: Vec<FlickrBox>,
    phrases: Vec<FlickrPhrase>,
}

#[derive(Debug, Deserialize)]
struct FlickrDataset {
    images: Vec<FlickrImage>,
}

fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| anyhow!("schema error at `{}`: {}", e.path(), e.inner()))
}

/// Snaps a float `[x, y, w, h]` box outward to whole pixels and clips it to
/// the image. `None` when nothing is left.
pub fn snap_box(b: [f64; 4], width: u32, height: u32) -> Option<BBox> {
    if b.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let clamp = |v: f64, max: u32| v.clamp(0.0, f64::from(max)) as u32;
    let (x0, y0) = (clamp(b[0].floor(), width), clamp(b[1].floor(), height));
    let (x1, y1) = (clamp((b[0] + b[2]).ceil(), width), clamp((b[1] + b[3]).ceil(), height));
    BBox::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0)).ok()
}

/// One image's boxes keyed by id, in input order, with degenerate ones dropped.
fn regions(boxes: impl Iterator<Item = (String, [f64; 4])>, width: u32, height: u32, summary: &mut ConvertSummary) -> Vec<Region> {
    boxes
        .filter_map(|(id, b)| match snap_box(b, width, height) {
            Some(bbox) => Some(Region::new(id, bbox)),
            None => {
                summary.degenerate_boxes_skipped += 1;
                None
            }
        })
        .collect()
}

fn file_stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map_or_else(|| name.to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn convert(text: &str, format: DatasetFormat, image_root: &Path) -> Result<(Vec<SceneFile>, ConvertSummary)> {
    match format {
        DatasetFormat::RefcocoLike => convert_refcoco(parse(text)?, image_root),
        DatasetFormat::FlickrLike => convert_flickr(parse(text)?, image_root),
    }
}

fn convert_refcoco(data: RefcocoDataset, image_root: &Path) -> Result<(Vec<SceneFile>, ConvertSummary)> {
    let mut summary = ConvertSummary::default();
    let images: HashMap<u64, &RefcocoImage> = data.images.iter().map(|i| (i.id, i)).collect();
    let mut anns_by_image: HashMap<u64, Vec<&RefcocoAnnotation>> = HashMap::new();
    let mut image_of_ann: HashMap<u64, u64> = HashMap::new();
    for ann in &data.annotations {
        if !images.contains_key(&ann.image_id) {
            return Err(anyhow!("annotation {} refers to unknown image {}", ann.id, ann.image_id));
        }
        anns_by_image.entry(ann.image_id).or_default().push(ann);
        image_of_ann.insert(ann.id, ann.image_id);
    }

    // target annotation → its sentences, in first-seen order
    let mut targets: BTreeMap<(usize, u64), Vec<String>> = BTreeMap::new();
    let mut first_seen: HashMap<u64, usize> = HashMap::new();
    for r in &data.refs {
        let mut ids = r.ann_ids.clone();
        ids.extend(r.ann_id);
        ids.sort_unstable();
        ids.dedup();
        if r.group || ids.len() > 1 {
            summary.group_refs_skipped += 1;
            continue;
        }
        let Some(&ann) = ids.first() else {
            summary.ungrounded_skipped += 1;
            continue;
        };
        if !image_of_ann.contains_key(&ann) {
            return Err(anyhow!("ref {} refers to unknown annotation {ann}", r.ref_id));
        }
        let next = first_seen.len();
        let order = *first_seen.entry(ann).or_insert(next);
        targets.entry((order, ann)).or_default().extend(r.sentences.iter().cloned());
    }

    let mut regions_by_image: HashMap<u64, Vec<Region>> = HashMap::new();
    for (&image_id, anns) in &anns_by_image {
        let image = images[&image_id];
        let boxes = anns.iter().map(|a| (a.id.to_string(), a.bbox));
        regions_by_image.insert(image_id, regions(boxes, image.width, image.height, &mut summary));
    }

    let mut scenes = Vec::new();
    for ((_, ann), sentences) in targets {
        let image = images[&image_of_ann[&ann]];
        let regions = regions_by_image[&image.id].clone();
        let target_id = ann.to_string();
        if !regions.iter().any(|r| r.id == target_id) {
            continue;
        }
        scenes.push(SceneFile {
            id: Some(format!("{}-{ann}", file_stem(&image.file_name))),
            image: image_root.join(&image.file_name),
            width: image.width,
            height: image.height,
            regions,
            target_id,
            ground_truth: sentences,
        });
    }
    summary.scenes = scenes.len();
    Ok((scenes, summary))
}

fn convert_flickr(data: FlickrDataset, image_root: &Path) -> Result<(Vec<SceneFile>, ConvertSummary)> {
    let mut summary = ConvertSummary::default();
    let mut scenes = Vec::new();
    for image in &data.images {
        let mut phrases_by_box: Vec<(String, Vec<String>)> = Vec::new();
        for p in &image.phrases {
            match p.box_ids.as_slice() {
                [] => summary.ungrounded_skipped += 1,
                [id] => {
                    if !image.boxes.iter().any(|b| &b.id == id) {
                        return Err(anyhow!("{}: phrase refers to unknown box {id}", image.file_name));
                    }
                    match phrases_by_box.iter_mut().find(|(b, _)| b == id) {
                        Some((_, texts)) => texts.push(p.text.clone()),
                        None => phrases_by_box.push((id.clone(), vec![p.text.clone()])),
                    }
                }
                _ => summary.group_refs_skipped += 1,
            }
        }
        if phrases_by_box.is_empty() {
            continue;
        }
        let mut local = ConvertSummary::default();
        let regions = regions(
            image.boxes.iter().map(|b| (b.id.clone(), b.bbox)),
            image.width,
            image.height,
            &mut local,
        );
        summary.degenerate_boxes_skipped += local.degenerate_boxes_skipped;
        for (box_id, texts) in phrases_by_box {
            if !regions.iter().any(|r| r.id == box_id) {
                continue;
            }
            scenes.push(SceneFile {
                id: Some(format!("{}-{box_id}", file_stem(&image.file_name))),
                image: image_root.join(&image.file_name),
                width: image.width,
                height: image.height,
                regions: regions.clone(),
                target_id: box_id,
                ground_truth: texts,
            });
        }
    }
    summary.scenes = scenes.len();
    Ok((scenes, summary))
}

pub fn convert_file(input: &Path, format: DatasetFormat, image_root: &Path) -> Result<(Vec<SceneFile>, ConvertSummary)> {
    let text = std::fs::read_to_string(input).with_context(|| format!("cannot read {}", input.display()))?;
    convert(&text, format, image_root).with_context(|| format!("cannot convert {}", input.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapping_rounds_outward_and_clips() {
        assert_eq!(snap_box([1.5, 2.2, 3.1, 1.0], 100, 100), BBox::new(1, 2, 4, 2).ok());
        assert_eq!(snap_box([-3.0, 0.0, 10.0, 5.0], 4, 4), BBox::new(0, 0, 4, 4).ok());
        assert_eq!(snap_box([5.0, 5.0, 0.0, 2.0], 10, 10), None);
        assert_eq!(snap_box([20.0, 0.0, 2.0, 2.0], 10, 10), None);
    }

    #[test]
    fn refcoco_mapping() {
        let text = r#"{
            "images": [{"id": 1, "file_name": "COCO_1.jpg", "width": 100, "height": 80}],
            "annotations": [
                {"id": 10, "image_id": 1, "bbox": [0, 0, 40.5, 30]},
                {"id": 11, "image_id": 1, "bbox": [50, 10, 20, 20]}
            ],
            "refs": [
                {"ref_id": 1, "ann_id": 11, "sentences": ["right box"]},
                {"ref_id": 2, "ann_ids": [10, 11], "sentences": ["both"]},
                {"ref_id": 3, "ann_id": 10, "sentences": ["left one"], "group": true},
                {"ref_id": 4, "ann_id": 11, "sentences": ["smaller box"]}
            ]
        }"#;
        let (scenes, summary) = convert(text, DatasetFormat::RefcocoLike, Path::new("imgs")).unwrap();
        assert_eq!(summary.scenes, 1);
        assert_eq!(summary.group_refs_skipped, 2);
        let s = &scenes[0];
        assert_eq!(s.id.as_deref(), Some("COCO_1-11"));
        assert_eq!(s.image, Path::new("imgs/COCO_1.jpg"));
        assert_eq!(s.target_id, "11");
        assert_eq!(s.regions.len(), 2);
        assert_eq!(s.regions[0].bbox, BBox::new(0, 0, 41, 30).unwrap());
        assert_eq!(s.ground_truth, vec!["right box", "smaller box"]);
    }

    #[test]
    fn flickr_mapping() {
        let text = r#"{"images": [{"file_name": "f.jpg", "width": 50, "height": 50,
            "boxes": [{"id": "a", "bbox": [0, 0, 10, 10]}, {"id": "b", "bbox": [20, 20, 10, 10]}],
            "phrases": [
                {"phrase_id": "1", "text": "a dog", "box_ids": ["a"]},
                {"phrase_id": "2", "text": "two dogs", "box_ids": ["a", "b"]},
                {"phrase_id": "3", "text": "the sky", "box_ids": []}
            ]}]}"#;
        let (scenes, summary) = convert(text, DatasetFormat::FlickrLike, Path::new("")).unwrap();
        assert_eq!(
            summary,
            ConvertSummary {
                scenes: 1,
                group_refs_skipped: 1,
                ungrounded_skipped: 1,
                degenerate_boxes_skipped: 0
            }
        );
        assert_eq!(scenes[0].target_id, "a");
        assert_eq!(scenes[0].regions.len(), 2);
        assert_eq!(scenes[0].ground_truth, vec!["a dog"]);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let text = r#"{"images": [], "annotations": [{"id": 1, "image_id": 1, "bbox": [0, 0, 2]}], "refs": []}"#;
        let err = convert(text, DatasetFormat::RefcocoLike, Path::new("")).unwrap_err();
        assert!(err.to_string().contains("annotations[0].bbox"), "{err}");

        let text = r#"{"images": [{"file_name": "x.jpg", "width": 1, "height": 1, "boxes": [], "phrases": [{"phrase_id": "1", "box_ids": []}]}]}"#;
        let err = convert(text, DatasetFormat::FlickrLike, Path::new("")).unwrap_err();
        assert!(err.to_string().contains("images[0].phrases[0]"), "{err}");
    }
}
