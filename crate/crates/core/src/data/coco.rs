//! COCO-format annotations with an extra per-annotation `active` flag.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KadError, Result};
use crate::geometry::{BoxCorners, BoxN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KadError::load(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| KadError::load(path, e.to_string()))
    }
}

/// Pixel corners to a normalized center-form box.
pub fn pixel_corners_to_box(x1: f64, y1: f64, x2: f64, y2: f64, width: f64, height: f64) -> Result<BoxN> {
    BoxCorners::new(x1 / width, y1 / height, x2 / width, y2 / height)?
        .clamp_unit()
        .to_center()
}

/// COCO `[x, y, w, h]` pixel box to a normalized center-form box.
pub fn coco_bbox_to_box(bbox: [f64; 4], width: f64, height: f64) -> Result<BoxN> {
    let [x, y, w, h] = bbox;
    pixel_corners_to_box(x, y, x + w, y + h, width, height)
}

/// Normalized box to COCO `[x, y, w, h]` pixels.
pub fn box_to_coco_bbox(b: &BoxN, width: f64, height: f64) -> [f64; 4] {
    let c = b.to_corners();
    [c.x1 * width, c.y1 * height, (c.x2 - c.x1) * width, (c.y2 - c.y1) * height]
}

/// One training/evaluation sample: an image and its single active object.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image_id: u64,
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub gt_box: BoxN,
    pub category: String,
    /// Other annotated instances in the image.
    pub distractors: Vec<BoxN>,
}

impl SceneRecord {
    /// Loads the image as interleaved RGB `u8`, resized to `size x size`.
    pub fn load_rgb(&self, size: usize) -> Result<Vec<u8>> {
        let img = image::open(&self.image_path)
            .map_err(|e| KadError::load(&self.image_path, e.to_string()))?
            .to_rgb8();
        let img = if img.width() as usize != size || img.height() as usize != size {
            image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
        } else {
            img
        };
        Ok(img.into_raw())
    }
}

/// `load_dataset`: one record per active annotation.
///
/// If any annotation of an image carries the `active` field, only those with
/// `active == 1` become records. Otherwise an image with a single annotation
/// yields that annotation, and an image with several is ambiguous.
pub fn load_dataset(annotation_path: &Path, images_root: &Path) -> Result<Vec<SceneRecord>> {
    let coco = CocoFile::read(annotation_path)?;
    let names: BTreeMap<u64, &str> = coco.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for a in &coco.annotations {
        by_image.entry(a.image_id).or_default().push(a);
    }

    let mut records = Vec::new();
    for img in &coco.images {
        let anns = by_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]);
        if anns.is_empty() {
            continue;
        }
        let path = images_root.join(&img.file_name);
        if !path.is_file() {
            return Err(KadError::load(&path, "image file not found"));
        }
        let flagged = anns.iter().any(|a| a.active.is_some());
        let actives: Vec<&CocoAnnotation> = if flagged {
            anns.iter().copied().filter(|a| a.active == Some(1)).collect()
        } else if anns.len() == 1 {
            vec![anns[0]]
        } else {
            return Err(KadError::Ambiguous(img.id));
        };
        let (w, h) = (img.width as f64, img.height as f64);
        for active in actives {
            let category = names
                .get(&active.category_id)
                .ok_or_else(|| KadError::load(annotation_path, format!("unknown category id {}", active.category_id)))?;
            let distractors = anns
                .iter()
                .filter(|a| a.id != active.id)
                .map(|a| coco_bbox_to_box(a.bbox, w, h))
                .collect::<Result<Vec<_>>>()?;
            records.push(SceneRecord {
                image_id: img.id,
                image_path: path.clone(),
                width: img.width,
                height: img.height,
                gt_box: coco_bbox_to_box(active.bbox, w, h)?,
                category: category.to_string(),
                distractors,
            });
        }
    }
    Ok(records)
}
