//! COCO-style mean average precision.
//!
//! For each class and each IoU threshold in `{0.50, 0.55, …, 0.95}`:
//! detections from all images are sorted by descending confidence (stable, so
//! ties keep input order), each one is greedily matched to the unmatched
//! same-image, same-class ground-truth box of highest IoU at or above the
//! threshold, and AP is the mean of the interpolated precision at 101 recall
//! points `0.00, 0.01, …, 1.00`. mAP averages AP over classes that have ground
//! truth, then over thresholds.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{iou, BBox};
use crate::victims::Detection;

pub const IOU_THRESHOLDS: usize = 10;
pub const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
}

impl From<&Detection> for GroundTruthBox {
    fn from(d: &Detection) -> Self {
        Self {
            bbox: d.bbox,
            class_id: d.class_id,
        }
    }
}

fn iou_threshold(i: usize) -> f64 {
    (50 + 5 * i) as f64 / 100.0
}

/// mAP over IoU 0.50:0.95. Returns 0 when no class has ground truth.
pub fn mean_average_precision(detections: &[Vec<Detection>], truth: &[Vec<GroundTruthBox>]) -> f64 {
    assert_eq!(detections.len(), truth.len(), "one detection list per image");
    let classes: BTreeSet<usize> = truth.iter().flatten().map(|g| g.class_id).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let per_threshold: Vec<f64> = (0..IOU_THRESHOLDS)
        .map(|t| {
            let thr = iou_threshold(t);
            let sum: f64 = classes
                .iter()
                .map(|&c| class_ap(detections, truth, c, thr))
                .sum();
            sum / classes.len() as f64
        })
        .collect();
    per_threshold.iter().sum::<f64>() / IOU_THRESHOLDS as f64
}

/// AP for one class at one IoU threshold.
pub(crate) fn class_ap(
    detections: &[Vec<Detection>],
    truth: &[Vec<GroundTruthBox>],
    class: usize,
    thr: f64,
) -> f64 {
    let npos = truth.iter().flatten().filter(|g| g.class_id == class).count();
    if npos == 0 {
        return 0.0;
    }
    let mut dets: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, ds)| ds.iter().map(move |d| (img, d)))
        .filter(|(_, d)| d.class_id == class)
        .collect();
    dets.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));

    let mut used: Vec<Vec<bool>> = truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for (img, d) in dets {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in truth[img].iter().enumerate() {
            if gt.class_id != class || used[img][g] {
                continue;
            }
            let v = iou(&d.bbox, &gt.bbox);
            if v >= thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                used[img][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for p in 0..RECALL_POINTS {
        let r = p as f64 / 100.0;
        let idx = recall.partition_point(|&rc| rc < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / RECALL_POINTS as f64
}
