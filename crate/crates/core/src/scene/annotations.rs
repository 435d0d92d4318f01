//! COCO-subset annotation files and the on-disk dataset layout.
//!
//! ```text
//! <dataset>/
//!   annotations.json      images, box annotations, categories (trainer-visible)
//!   images/000000.png     8-bit RGB
//!   depth/000000.dbr      pseudo-depth, DBR1 raster
//!   eval/gt_masks.json    run-length instance masks (evaluation only)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoxAnnotation, Scene, Shape, TrainScene};
use crate::error::{Error, Result};
use crate::imagegrid::{read_dbr, read_png_gray, read_png_rgb, write_dbr, write_png, PixelBox, Raster};

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const EVAL_MASKS_FILE: &str = "eval/gt_masks.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
    /// Pseudo-depth raster (`.dbr`, or a grayscale `.png` from an external predictor).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

impl AnnotationRecord {
    pub fn pixel_box(&self) -> PixelBox {
        let [x, y, w, h] = self.bbox;
        PixelBox {
            x0: x.floor() as usize,
            y0: y.floor() as usize,
            x1: (x + w).ceil() as usize,
            y1: (y + h).ceil() as usize,
        }
    }
}

fn image_name(id: u64) -> String {
    format!("images/{id:06}.png")
}

fn depth_name(id: u64) -> String {
    format!("depth/{id:06}.dbr")
}

pub fn annotations_from_scenes(scenes: &[Scene]) -> AnnotationSet {
    let mut images = Vec::with_capacity(scenes.len());
    let mut annotations = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let id = i as u64;
        images.push(ImageRecord {
            id,
            file_name: image_name(id),
            height: scene.height(),
            width: scene.width(),
            depth_file: Some(depth_name(id)),
            seed: Some(scene.seed),
        });
        for inst in &scene.instances {
            let b = inst.bbox;
            annotations.push(AnnotationRecord {
                id: annotations.len() as u64 + 1,
                image_id: id,
                category_id: inst.category,
                bbox: [b.x0 as f64, b.y0 as f64, b.width() as f64, b.height() as f64],
                area: inst.gt_mask.data().iter().filter(|&&v| v > 0.5).count() as f64,
                iscrowd: 0,
            });
        }
    }
    AnnotationSet {
        images,
        annotations,
        categories: Shape::ALL
            .iter()
            .map(|s| CategoryRecord {
                id: s.category_id(),
                name: s.name().to_string(),
            })
            .collect(),
    }
}

pub fn save_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(set)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses and validates an annotation file. File references are resolved against
/// the file's directory.
pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let set: AnnotationSet = serde_json::from_str(&text)
        .map_err(|e| Error::Annotation(format!("{}: malformed JSON: {e}", path.display())))?;
    let root = path.parent().unwrap_or(Path::new("."));
    validate(&set, root)?;
    Ok(set)
}

fn validate(set: &AnnotationSet, root: &Path) -> Result<()> {
    let mut images = BTreeMap::new();
    for (i, img) in set.images.iter().enumerate() {
        if images.insert(img.id, img).is_some() {
            return Err(Error::Annotation(format!("images[{i}]: duplicate image id {}", img.id)));
        }
        for file in std::iter::once(&img.file_name).chain(img.depth_file.iter()) {
            if !root.join(file).is_file() {
                return Err(Error::Annotation(format!(
                    "images[{i}] (id {}): referenced file {file} does not exist",
                    img.id
                )));
            }
        }
    }
    let categories: BTreeSet<u32> = set.categories.iter().map(|c| c.id).collect();
    let mut ids = BTreeSet::new();
    for (i, ann) in set.annotations.iter().enumerate() {
        let at = format!("annotations[{i}] (id {})", ann.id);
        if !ids.insert(ann.id) {
            return Err(Error::Annotation(format!("{at}: duplicate annotation id")));
        }
        let img = images.get(&ann.image_id).ok_or_else(|| {
            Error::Annotation(format!("{at}: image_id {} does not exist", ann.image_id))
        })?;
        if !categories.contains(&ann.category_id) {
            return Err(Error::Annotation(format!(
                "{at}: category_id {} is not declared",
                ann.category_id
            )));
        }
        let [x, y, w, h] = ann.bbox;
        if !ann.bbox.iter().all(|v| v.is_finite()) {
            return Err(Error::Annotation(format!("{at}: bbox has non-finite values")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Annotation(format!(
                "{at}: bbox needs x1 > x0 and y1 > y0, got [{x}, {y}, {w}, {h}]"
            )));
        }
        if x < 0.0 || y < 0.0 || x + w > img.width as f64 || y + h > img.height as f64 {
            return Err(Error::Annotation(format!(
                "{at}: bbox [{x}, {y}, {w}, {h}] exceeds image {}x{}",
                img.width, img.height
            )));
        }
    }
    Ok(())
}

/// Writes images, pseudo-depth, annotations and evaluation masks under `dir`.
pub fn write_dataset(scenes: &[Scene], dir: &Path) -> Result<AnnotationSet> {
    for sub in ["images", "depth", "eval"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let set = annotations_from_scenes(scenes);
    for (scene, img) in scenes.iter().zip(&set.images) {
        write_png(&scene.image, &dir.join(&img.file_name))?;
        write_dbr(
            &scene.pseudo_depth,
            &dir.join(img.depth_file.as_ref().expect("generated scenes carry depth")),
        )?;
    }
    save_annotations(&set, &dir.join(ANNOTATIONS_FILE))?;

    let mut masks = Vec::new();
    let mut next = set.annotations.iter();
    for (i, scene) in scenes.iter().enumerate() {
        for inst in &scene.instances {
            let ann = next.next().expect("one record per instance");
            masks.push(MaskRecord {
                annotation_id: ann.id,
                image_id: i as u64,
                height: inst.gt_mask.height(),
                width: inst.gt_mask.width(),
                counts: rle_encode(&inst.gt_mask),
            });
        }
    }
    let path = dir.join(EVAL_MASKS_FILE);
    let text = serde_json::to_string(&MaskFile { masks })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(set)
}

/// Loads everything the trainer is allowed to see.
pub fn load_training_set(dir: &Path) -> Result<Vec<TrainScene>> {
    let set = load_annotations(&dir.join(ANNOTATIONS_FILE))?;
    set.images
        .iter()
        .map(|img| {
            let image = read_png_rgb(&dir.join(&img.file_name))?;
            let depth_file = img.depth_file.as_ref().ok_or_else(|| {
                Error::Annotation(format!("image {} has no pseudo-depth file", img.id))
            })?;
            let depth_path = dir.join(depth_file);
            let pseudo_depth = if depth_file.ends_with(".png") {
                read_png_gray(&depth_path)?
            } else {
                read_dbr(&depth_path)?
            };
            if image.height() != img.height || image.width() != img.width {
                return Err(Error::Annotation(format!(
                    "image {}: file is {}x{}, record says {}x{}",
                    img.id,
                    image.height(),
                    image.width(),
                    img.height,
                    img.width
                )));
            }
            image.ensure_same_size(&pseudo_depth, "pseudo-depth vs image")?;
            if pseudo_depth.channels() != 1 {
                return Err(Error::Annotation(format!(
                    "image {}: pseudo-depth must have one channel",
                    img.id
                )));
            }
            let annotations = set
                .annotations
                .iter()
                .filter(|a| a.image_id == img.id)
                .map(|a| BoxAnnotation {
                    bbox: a.pixel_box(),
                    category: a.category_id,
                })
                .collect();
            Ok(TrainScene {
                id: img.id,
                image,
                pseudo_depth,
                annotations,
            })
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskRecord {
    annotation_id: u64,
    image_id: u64,
    height: usize,
    width: usize,
    /// Alternating run lengths in row-major order, starting with a (possibly empty) run of zeros.
    counts: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskFile {
    masks: Vec<MaskRecord>,
}

/// Held-out masks, grouped per image in annotation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalMasks {
    by_image: BTreeMap<u64, Vec<Raster>>,
}

impl EvalMasks {
    pub fn for_image(&self, image_id: u64) -> &[Raster] {
        self.by_image.get(&image_id).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn load_eval_masks(dir: &Path) -> Result<EvalMasks> {
    let path = dir.join(EVAL_MASKS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: MaskFile = serde_json::from_str(&text)
        .map_err(|e| Error::Annotation(format!("{}: malformed JSON: {e}", path.display())))?;
    let mut by_image: BTreeMap<u64, Vec<(u64, Raster)>> = BTreeMap::new();
    for (i, m) in file.masks.into_iter().enumerate() {
        let raster = rle_decode(&m.counts, m.height, m.width)
            .ok_or_else(|| Error::Annotation(format!("masks[{i}]: run lengths do not cover the mask")))?;
        by_image.entry(m.image_id).or_default().push((m.annotation_id, raster));
    }
    Ok(EvalMasks {
        by_image: by_image
            .into_iter()
            .map(|(k, mut v)| {
                v.sort_by_key(|(id, _)| *id);
                (k, v.into_iter().map(|(_, r)| r).collect())
            })
            .collect(),
    })
}

fn rle_encode(mask: &Raster) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &v in mask.data() {
        let on = v > 0.5;
        if on != current {
            counts.push(run);
            run = 0;
            current = on;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

fn rle_decode(counts: &[u32], height: usize, width: usize) -> Option<Raster> {
    let mut data = Vec::with_capacity(height * width);
    for (i, &c) in counts.iter().enumerate() {
        let v = if i % 2 == 0 { 0.0 } else { 1.0 };
        data.extend(std::iter::repeat(v).take(c as usize));
    }
    Raster::new(height, width, 1, data).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, SceneConfig};

    #[test]
    fn save_then_load_round_trips() {
        let scenes = generate_dataset(&SceneConfig::default(), 11, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let set = write_dataset(&scenes, dir.path()).unwrap();
        let back = load_annotations(&dir.path().join(ANNOTATIONS_FILE)).unwrap();
        assert_eq!(set, back);

        let train = load_training_set(dir.path()).unwrap();
        for (t, s) in train.iter().zip(&scenes) {
            assert_eq!(t.image, s.image, "8-bit images round-trip exactly");
            assert_eq!(t.pseudo_depth, s.pseudo_depth);
            let boxes: Vec<_> = s.instances.iter().map(|i| i.bbox).collect();
            let loaded: Vec<_> = t.annotations.iter().map(|a| a.bbox).collect();
            assert_eq!(boxes, loaded);
        }
        let masks = load_eval_masks(dir.path()).unwrap();
        for (i, s) in scenes.iter().enumerate() {
            let gt: Vec<_> = s.instances.iter().map(|i| i.gt_mask.clone()).collect();
            assert_eq!(masks.for_image(i as u64), gt.as_slice());
        }
    }

    #[test]
    fn empty_scene_list_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], dir.path()).unwrap();
        let set = load_annotations(&dir.path().join(ANNOTATIONS_FILE)).unwrap();
        assert!(set.annotations.is_empty() && set.images.is_empty());
        let text = fs::read_to_string(dir.path().join(ANNOTATIONS_FILE)).unwrap();
        assert!(text.contains("\"annotations\": []"));
    }

    #[test]
    fn rejects_inverted_box_with_position() {
        let scenes = generate_dataset(&SceneConfig::default(), 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut set = write_dataset(&scenes, dir.path()).unwrap();
        set.annotations[1].bbox[2] = -3.0;
        let p = dir.path().join(ANNOTATIONS_FILE);
        save_annotations(&set, &p).unwrap();
        let err = load_annotations(&p).unwrap_err().to_string();
        assert!(err.contains("annotations[1]"), "{err}");
    }

    #[test]
    fn rejects_out_of_bounds_dangling_and_malformed() {
        let scenes = generate_dataset(&SceneConfig::default(), 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(ANNOTATIONS_FILE);
        let set = write_dataset(&scenes, dir.path()).unwrap();

        let mut oob = set.clone();
        oob.annotations[0].bbox = [90.0, 90.0, 20.0, 5.0];
        save_annotations(&oob, &p).unwrap();
        assert!(load_annotations(&p).unwrap_err().to_string().contains("exceeds"));

        let mut dangling = set.clone();
        dangling.images[0].depth_file = Some("depth/missing.dbr".into());
        save_annotations(&dangling, &p).unwrap();
        assert!(load_annotations(&p).unwrap_err().to_string().contains("does not exist"));

        let mut orphan = set.clone();
        orphan.annotations[0].image_id = 99;
        save_annotations(&orphan, &p).unwrap();
        assert!(load_annotations(&p).unwrap_err().to_string().contains("image_id 99"));

        fs::write(&p, "{ not json").unwrap();
        assert!(load_annotations(&p).unwrap_err().to_string().contains("malformed"));
    }

    #[test]
    fn ingests_extra_coco_fields() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        write_png(&Raster::zeros(4, 4, 3), &dir.path().join("images/a.png")).unwrap();
        let json = r#"{"info": {"year": 2017}, "licenses": [],
            "images": [{"id": 5, "file_name": "images/a.png", "height": 4, "width": 4, "license": 1}],
            "annotations": [{"id": 1, "image_id": 5, "category_id": 2, "bbox": [0.5, 1, 2, 2.5],
                             "segmentation": [[0, 0, 1, 1]], "area": 3.0, "iscrowd": 0}],
            "categories": [{"id": 2, "name": "thing", "supercategory": "x"}]}"#;
        let p = dir.path().join("coco.json");
        fs::write(&p, json).unwrap();
        let set = load_annotations(&p).unwrap();
        assert_eq!(set.annotations[0].pixel_box(), PixelBox { x0: 0, y0: 1, x1: 3, y1: 4 });
    }

    #[test]
    fn rle_round_trip() {
        let m = Raster::from_fn(5, 7, |y, x| ((x * y) % 3 == 1) as u8 as f64);
        assert_eq!(rle_decode(&rle_encode(&m), 5, 7).unwrap(), m);
        let full = Raster::filled(3, 3, 1, 1.0);
        assert_eq!(rle_encode(&full), vec![0, 9]);
    }
}
