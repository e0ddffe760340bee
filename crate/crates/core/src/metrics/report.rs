//! Campaign reports (JSON + flat CSV).
//!
//! Rows are sorted by file name so the report does not depend on worker
//! scheduling. No timestamps are recorded.

use serde::{Deserialize, Serialize};

use super::{mean_average_precision, removal_rate, GroundTruthBox};
use crate::victims::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Rfpar,
    RandomBaseline,
}

/// One attacked image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub file: String,
    pub seed: u64,
    pub success: bool,
    /// Changed elements (channel entries).
    pub l0: usize,
    pub l0_pixels: usize,
    pub ata: f64,
    pub queries: u64,
    pub cycles_used: usize,
    pub best_reward: f64,
    /// Classification: true label and the final prediction.
    pub label: Option<usize>,
    pub adv_class: Option<usize>,
    /// Detection: `n(x)` and `n(x̄)`.
    pub clean_objects: Option<usize>,
    pub adv_objects: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    /// Mean fraction of clean objects removed.
    pub removal_rate: f64,
    pub map_clean: f64,
    pub map_adv: f64,
    /// `map_clean − map_adv`.
    pub map_reduction: f64,
}

impl DetectionSummary {
    /// Scores clean and adversarial detections against the clean detections.
    ///
    /// Both lists should hold only objects above the detection threshold.
    pub fn compute(clean: &[Vec<Detection>], adv: &[Vec<Detection>]) -> Self {
        let truth: Vec<Vec<GroundTruthBox>> = clean
            .iter()
            .map(|ds| ds.iter().map(GroundTruthBox::from).collect())
            .collect();
        let map_clean = mean_average_precision(clean, &truth);
        let map_adv = mean_average_precision(adv, &truth);
        let clean_counts: Vec<usize> = clean.iter().map(Vec::len).collect();
        let adv_counts: Vec<usize> = adv.iter().map(Vec::len).collect();
        Self {
            removal_rate: removal_rate(&clean_counts, &adv_counts),
            map_clean,
            map_adv,
            map_reduction: map_clean - map_adv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub task: String,
    pub attack: AttackKind,
    pub attacked: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_l0: f64,
    pub mean_l0_pixels: f64,
    pub mean_ata: f64,
    pub mean_queries: f64,
    pub total_queries: u64,
    pub detection: Option<DetectionSummary>,
    pub images: Vec<ImageRow>,
    pub skipped: Vec<SkippedImage>,
    pub failed: Vec<SkippedImage>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl CampaignReport {
    pub fn new(
        task: impl Into<String>,
        attack: AttackKind,
        mut images: Vec<ImageRow>,
        mut skipped: Vec<SkippedImage>,
        mut failed: Vec<SkippedImage>,
        detection: Option<DetectionSummary>,
    ) -> Self {
        images.sort_by(|a, b| a.file.cmp(&b.file));
        skipped.sort_by(|a, b| a.file.cmp(&b.file));
        failed.sort_by(|a, b| a.file.cmp(&b.file));
        let attacked = images.len();
        let successes = images.iter().filter(|r| r.success).count();
        Self {
            task: task.into(),
            attack,
            attacked,
            successes,
            success_rate: if attacked == 0 {
                0.0
            } else {
                successes as f64 / attacked as f64
            },
            mean_l0: mean(images.iter().map(|r| r.l0 as f64)),
            mean_l0_pixels: mean(images.iter().map(|r| r.l0_pixels as f64)),
            mean_ata: mean(images.iter().map(|r| r.ata)),
            mean_queries: mean(images.iter().map(|r| r.queries as f64)),
            total_queries: images.iter().map(|r| r.queries).sum(),
            detection,
            images,
            skipped,
            failed,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per attacked image.
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.images {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}
