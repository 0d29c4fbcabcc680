//! Scene files on disk and the JSON-lines helpers shared by every command.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use refexp_core::{validate_scene, Image, Region, Scene};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// One scene as stored on disk. `image` is resolved relative to the file
/// that contains the record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image: PathBuf,
    pub width: u32,
    pub height: u32,
    pub regions: Vec<Region>,
    pub target_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ground_truth: Vec<String>,
}

/// A parsed scene record together with its resolved id and base directory.
#[derive(Debug, Clone)]
pub struct SceneEntry {
    pub id: String,
    pub file: SceneFile,
    pub base_dir: PathBuf,
}

impl SceneEntry {
    pub fn image_path(&self) -> PathBuf {
        self.base_dir.join(&self.file.image)
    }

    /// Reads the image and validates the regions against it.
    pub fn load(&self) -> Result<Scene> {
        let path = self.image_path();
        let image = load_image(&path)?;
        let scene = Scene {
            image,
            regions: self.file.regions.clone(),
            target_id: self.file.target_id.clone(),
            ground_truth: self.file.ground_truth.clone(),
        };
        Ok(validate_scene(scene, self.file.width, self.file.height)?)
    }

    pub fn target(&self) -> Option<&Region> {
        self.file.regions.iter().find(|r| r.id == self.file.target_id)
    }
}

pub fn load_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path)
        .with_context(|| format!("cannot read image {}", path.display()))?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image::new(w, h, rgb.into_raw())?)
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(image.width(), image.height(), image.pixels().to_vec())
        .expect("buffer length matches dimensions");
    buf.save(path)
        .with_context(|| format!("cannot write {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn parse_scene_json(text: &str, origin: &str) -> Result<SceneFile> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).with_context(|| format!("{origin}: invalid scene record"))
}

/// Reads scenes from a `.jsonl` file (one record per line), a single `.json`
/// file, or a directory of `.json` files taken in name order. Records
/// without an id get the file stem, or `stem:line` inside a JSON-lines file.
pub fn read_scenes(path: &Path) -> Result<Vec<SceneEntry>> {
    let mut entries = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("cannot list {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.extension().is_some_and(|e| e == "json"));
        files.sort();
        for file in files {
            entries.push(read_single(&file)?);
        }
    } else if path.extension().is_some_and(|e| e == "jsonl") {
        let base_dir = parent_dir(path);
        for (lineno, line) in read_lines(path)? {
            let file = parse_scene_json(&line, &format!("{}:{lineno}", path.display()))?;
            let id = file.id.clone().unwrap_or_else(|| format!("{}:{lineno}", stem(path)));
            entries.push(SceneEntry {
                id,
                file,
                base_dir: base_dir.clone(),
            });
        }
    } else {
        entries.push(read_single(path)?);
    }

    let mut seen = HashSet::new();
    for e in &entries {
        if !seen.insert(e.id.as_str()) {
            bail!("duplicate scene id `{}`", e.id);
        }
    }
    Ok(entries)
}

fn read_single(path: &Path) -> Result<SceneEntry> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let file = parse_scene_json(&text, &path.display().to_string())?;
    Ok(SceneEntry {
        id: file.id.clone().unwrap_or_else(|| stem(path)),
        file,
        base_dir: parent_dir(path),
    })
}

/// Non-blank lines with their 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.with_context(|| format!("cannot read {}", path.display()))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_lines(path)?
        .into_iter()
        .map(|(lineno, line)| {
            let de = &mut serde_json::Deserializer::from_str(&line);
            serde_path_to_error::deserialize(de)
                .with_context(|| format!("{}:{lineno}: invalid record", path.display()))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(writer: impl Write, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Opens `path` for writing, or stdout when `path` is `None` or `-`.
pub fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) if p != Path::new("-") => Ok(Box::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        _ => Ok(Box::new(std::io::stdout().lock())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use refexp_core::BBox;

    fn scene_file(id: Option<&str>) -> SceneFile {
        SceneFile {
            id: id.map(String::from),
            image: "img.png".into(),
            width: 4,
            height: 2,
            regions: vec![
                Region::new("a", BBox::new(0, 0, 2, 2).unwrap()),
                Region::new("b", BBox::new(2, 0, 2, 2).unwrap()),
            ],
            target_id: "b".into(),
            ground_truth: vec!["the right one".into()],
        }
    }

    #[test]
    fn scene_file_json_shape() {
        let json = serde_json::to_value(scene_file(None)).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "image": "img.png", "width": 4, "height": 2,
                "regions": [{"id": "a", "bbox": [0, 0, 2, 2]}, {"id": "b", "bbox": [2, 0, 2, 2]}],
                "target_id": "b", "ground_truth": ["the right one"]
            })
        );
    }

    #[test]
    fn bad_bbox_reports_field_path() {
        let err = parse_scene_json(
            r#"{"image":"x.png","width":4,"height":2,"regions":[{"id":"a","bbox":[0,0,2]}],"target_id":"a"}"#,
            "t",
        )
        .unwrap_err();
        assert!(format!("{err:#}").contains("regions[0].bbox"), "{err:#}");
    }

    #[test]
    fn reads_all_layouts_with_ids() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(4, 2, [10, 20, 30]).unwrap();
        save_png(&img, &dir.path().join("img.png")).unwrap();

        let jsonl = dir.path().join("set.jsonl");
        write_jsonl(File::create(&jsonl).unwrap(), &[scene_file(Some("first")), scene_file(None)]).unwrap();
        let entries = read_scenes(&jsonl).unwrap();
        let ids: Vec<_> = entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["first", "set:2"]);
        let scene = entries[0].load().unwrap();
        assert_eq!(scene.image, img);
        assert_eq!(scene.target().unwrap().id, "b");

        let sub = dir.path().join("many");
        std::fs::create_dir(&sub).unwrap();
        for name in ["b_scene", "a_scene"] {
            let mut f = scene_file(None);
            f.image = "../img.png".into();
            std::fs::write(sub.join(format!("{name}.json")), serde_json::to_string(&f).unwrap()).unwrap();
        }
        let entries = read_scenes(&sub).unwrap();
        let ids: Vec<_> = entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a_scene", "b_scene"]);
        entries[1].load().unwrap();

        let single = sub.join("a_scene.json");
        assert_eq!(read_scenes(&single).unwrap()[0].id, "a_scene");
    }

    #[test]
    fn duplicate_ids_and_size_mismatch_fail() {
        let dir = tempfile::tempdir().unwrap();
        let jsonl = dir.path().join("dup.jsonl");
        write_jsonl(File::create(&jsonl).unwrap(), &[scene_file(Some("x")), scene_file(Some("x"))]).unwrap();
        assert!(read_scenes(&jsonl).unwrap_err().to_string().contains("duplicate"));

        save_png(&Image::filled(5, 2, [0, 0, 0]).unwrap(), &dir.path().join("img.png")).unwrap();
        let entry = SceneEntry {
            id: "s".into(),
            file: scene_file(None),
            base_dir: dir.path().into(),
        };
        assert!(entry.load().is_err());
        let missing = SceneEntry {
            base_dir: dir.path().join("nowhere"),
            ..entry
        };
        assert!(format!("{:#}", missing.load().unwrap_err()).contains("cannot read image"));
    }
}
