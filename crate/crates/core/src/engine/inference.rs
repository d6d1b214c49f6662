//! Student-only inference, attention dumps, and dataset evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::load_checkpoint;
use super::eval::{coco_ap, EvalResult, ImageDetections};
use super::train::{batch_bundles, LoadedSplit};
use crate::aggregator::{PriorBundle, PriorFlags};
use crate::blob::Matrix;
use crate::error::{KadError, Result};
use crate::geometry::BoxN;
use crate::model::{attention_export, images_to_tensor, Heatmap, KadModel};
use crate::priors::PriorCache;

/// `evaluate_ap`: student predictions on every record, all `m` ranked.
pub fn evaluate_ap(model: &KadModel, split: &LoadedSplit, batch: usize) -> Result<EvalResult> {
    let mut images = Vec::with_capacity(split.len());
    let all: Vec<usize> = (0..split.len()).collect();
    for idx in all.chunks(batch.max(1)) {
        let (_, out) = model.run_student(&split.images(idx, model.device())?)?;
        for (set, &i) in out.detections()?.into_iter().zip(idx) {
            let r = &split.records[i];
            images.push(ImageDetections {
                image_id: r.image_id,
                scores: set.scores,
                boxes: set.boxes,
                gt: r.gt_box,
            });
        }
    }
    Ok(coco_ap(&images))
}

/// AP of the teacher branch: one prediction per image from its oracle query.
pub fn evaluate_teacher_ap(
    model: &KadModel,
    split: &LoadedSplit,
    cache: Option<&PriorCache>,
    flags: PriorFlags,
    batch: usize,
) -> Result<EvalResult> {
    let mut images = Vec::with_capacity(split.len());
    let all: Vec<usize> = (0..split.len()).collect();
    for idx in all.chunks(batch.max(1)) {
        let feats = model.encode(&split.images(idx, model.device())?)?;
        let bundles = batch_bundles(split, idx, cache, flags, model.aggregator().dims())?;
        let refs: Vec<&PriorBundle> = bundles.iter().collect();
        let oracles = model
            .aggregator()
            .build_oracle_batch(&refs, flags, model.dtype(), model.device())?;
        let out = model.run_teacher(&feats, &oracles)?;
        for (set, &i) in out.detections()?.into_iter().zip(idx) {
            let r = &split.records[i];
            images.push(ImageDetections {
                image_id: r.image_id,
                scores: set.scores,
                boxes: set.boxes,
                gt: r.gt_box,
            });
        }
    }
    Ok(coco_ap(&images))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub score: f64,
    pub bbox: BoxN,
    /// Index of the winning student query.
    pub query: usize,
    #[serde(skip)]
    pub heatmaps: Vec<Heatmap>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dumped: Vec<PathBuf>,
}

/// `infer_active`: top-scoring student detection for one RGB image of the
/// model's input size, with the winning query's per-layer attention.
pub fn infer_active(model: &KadModel, rgb: &[u8]) -> Result<Inference> {
    let size = model.config().image_size;
    let (_, out) = model.run_student(&images_to_tensor(&[rgb], size, model.device())?)?;
    let set = out.detections()?.remove(0);
    let (query, score, bbox) = set.top().ok_or(KadError::EmptyInput("no detections"))?;
    let heatmaps = attention_export(&out.trace, 0, query)?;
    Ok(Inference {
        score,
        bbox,
        query,
        heatmaps,
        dumped: Vec::new(),
    })
}

/// Writes each heatmap as `layer{l}.f32` (raw, blob format) and
/// `layer{l}.png` (max-normalized grayscale, upscaled by `scale`).
pub fn dump_heatmaps(heatmaps: &[Heatmap], dir: &Path, scale: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let scale = scale.max(1);
    let mut paths = Vec::new();
    for hm in heatmaps {
        let raw = dir.join(format!("layer{}.f32", hm.layer));
        Matrix::new(hm.h, hm.w, hm.values.clone())?.write(&raw)?;
        let max = hm.values.iter().copied().fold(0f32, f32::max).max(f32::MIN_POSITIVE);
        let img = image::GrayImage::from_fn((hm.w * scale) as u32, (hm.h * scale) as u32, |x, y| {
            let v = hm.values[(y as usize / scale) * hm.w + x as usize / scale] / max;
            image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        let png = dir.join(format!("layer{}.png", hm.layer));
        img.save(&png)?;
        paths.push(raw);
        paths.push(png);
    }
    Ok(paths)
}

/// Loads a checkpoint and an image file and runs [`infer_active`].
pub fn infer_image(checkpoint: &Path, image_path: &Path, attn_dump: Option<&Path>) -> Result<Inference> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let size = model.config().image_size;
    let img = image::open(image_path)
        .map_err(|e| KadError::load(image_path, e.to_string()))?
        .to_rgb8();
    let img = image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle);
    let mut result = infer_active(&model, img.as_raw())?;
    if let Some(dir) = attn_dump {
        let scale = size / result.heatmaps.first().map_or(size, |h| h.w.max(1));
        result.dumped = dump_heatmaps(&result.heatmaps, dir, scale)?;
    }
    Ok(result)
}
