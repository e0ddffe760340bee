//! Evaluation quantities: L0, ATA, IoU, removal rate and COCO-style mAP.

mod map;
mod report;

use serde::{Deserialize, Serialize};

use crate::image::Perturbation;

pub use map::{mean_average_precision, GroundTruthBox, IOU_THRESHOLDS, RECALL_POINTS};
pub use report::{AttackKind, CampaignReport, DetectionSummary, ImageRow, SkippedImage};

/// Axis-aligned box `(x1, y1, x2, y2)` in pixel coordinates.
///
/// Serialized as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Lexicographic order on `(x1, y1, x2, y2)`.
    pub fn cmp_coords(&self, other: &BBox) -> std::cmp::Ordering {
        self.x1
            .total_cmp(&other.x1)
            .then(self.y1.total_cmp(&other.y1))
            .then(self.x2.total_cmp(&other.x2))
            .then(self.y2.total_cmp(&other.y2))
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Number of changed elements (channel entries).
pub fn l0_elements(delta: &Perturbation) -> usize {
    delta.entries.len()
}

/// Number of distinct `(row, col)` positions with at least one changed channel.
pub fn l0_pixels(delta: &Perturbation) -> usize {
    let mut pixels: Vec<(usize, usize)> = delta.entries.keys().map(|&(_, r, k)| (r, k)).collect();
    pixels.sort_unstable();
    pixels.dedup();
    pixels.len()
}

/// Attacked pixels as a fraction of all pixels.
pub fn ata(delta: &Perturbation) -> f64 {
    l0_pixels(delta) as f64 / delta.dims.pixels() as f64
}

/// Mean over images of `(n(x) − n(x̄)) / n(x)`, clamped below at 0.
///
/// Images with no clean objects are ignored; with none left the result is 0.
pub fn removal_rate(clean_counts: &[usize], adv_counts: &[usize]) -> f64 {
    let fractions: Vec<f64> = clean_counts
        .iter()
        .zip(adv_counts)
        .filter(|(&n, _)| n > 0)
        .map(|(&n, &m)| ((n as f64 - m as f64) / n as f64).max(0.0))
        .collect();
    if fractions.is_empty() {
        0.0
    } else {
        fractions.iter().sum::<f64>() / fractions.len() as f64
    }
}
