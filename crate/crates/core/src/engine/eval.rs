//! COCO-style average precision for one ground-truth box per image.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BoxN};

/// `0.50, 0.55, ..., 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

const RECALL_POINTS: usize = 101;

/// Scored predictions and the single ground truth of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub image_id: u64,
    pub scores: Vec<f64>,
    pub boxes: Vec<BoxN>,
    pub gt: BoxN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDiagnostics {
    pub image_id: u64,
    pub top_score: f64,
    /// IoU of the highest-scored prediction with the ground truth.
    pub top_iou: f64,
    /// Best IoU over all predictions.
    pub best_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// AP at each of the ten IoU thresholds.
    pub per_threshold: Vec<f64>,
    pub per_image: Vec<ImageDiagnostics>,
}

impl EvalResult {
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            ap: self.ap,
            ap50: self.ap50,
            ap75: self.ap75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// AP at one threshold: greedy score-ranked matching per image, then
/// 101-point interpolated precision over the pooled ranking.
fn ap_at(images: &[ImageDetections], ious: &[Vec<f64>], threshold: f64) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    // (score, is_tp), pooled over images
    let mut dets: Vec<(f64, bool)> = Vec::new();
    for (img, img_ious) in images.iter().zip(ious) {
        let mut order: Vec<usize> = (0..img.scores.len()).collect();
        order.sort_by(|&a, &b| img.scores[b].total_cmp(&img.scores[a]));
        let mut gt_taken = false;
        for i in order {
            let tp = !gt_taken && img_ious[i] >= threshold;
            gt_taken |= tp;
            dets.push((img.scores[i], tp));
        }
    }
    // stable, so equal scores keep image order as COCO's mergesort does
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let npos = images.len() as f64;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    let (mut tp, mut fp) = (0.0, 0.0);
    for &(_, is_tp) in &dets {
        if is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        precision.push(tp / (tp + fp));
        recall.push(tp / npos);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        // first index whose recall reaches r
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Evaluates pooled detections. Images with no predictions count as misses.
pub fn coco_ap(images: &[ImageDetections]) -> EvalResult {
    let ious: Vec<Vec<f64>> = images
        .iter()
        .map(|img| {
            let g = img.gt.to_corners();
            img.boxes.iter().map(|b| iou(&b.to_corners(), &g)).collect()
        })
        .collect();
    let per_threshold: Vec<f64> = iou_thresholds().iter().map(|&t| ap_at(images, &ious, t)).collect();
    let per_image = images
        .iter()
        .zip(&ious)
        .map(|(img, img_ious)| {
            let top = (0..img.scores.len()).max_by(|&a, &b| img.scores[a].total_cmp(&img.scores[b]).then(b.cmp(&a)));
            ImageDiagnostics {
                image_id: img.image_id,
                top_score: top.map_or(0.0, |i| img.scores[i]),
                top_iou: top.map_or(0.0, |i| img_ious[i]),
                best_iou: img_ious.iter().copied().fold(0.0, f64::max),
            }
        })
        .collect();
    EvalResult {
        ap: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        ap50: per_threshold[0],
        ap75: per_threshold[5],
        per_threshold,
        per_image,
    }
}
