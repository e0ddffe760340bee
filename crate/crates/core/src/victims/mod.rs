//! The black-box boundary: victims are only ever seen through their outputs.
//!
//! Every completed evaluation goes through [`query_classifier`] or
//! [`query_detector`], which bump a shared [`QueryCounter`]. Failed
//! evaluations (dimension mismatch, transport failure) are not counted.

mod cnn;
mod grid;
mod linear;
pub mod remote;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Dims, Image};
use crate::metrics::{iou, BBox};
use crate::weights::WeightsError;

pub use cnn::TinyCnn;
pub use grid::{GridDetector, DEFAULT_GAIN};
pub use linear::LinearSoftmax;
pub use remote::RemoteVictim;

/// Confidence a candidate must strictly exceed to count as a detected object.
pub const DETECTION_THRESHOLD: f64 = 0.5;

/// IoU needed to treat a perturbed-image candidate as the same object.
pub const MATCH_IOU: f64 = 0.5;

const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VictimError {
    #[error("victim expects {expected:?}, got {got:?}")]
    DimMismatch { expected: Dims, got: Dims },
    #[error("retryable transport failure: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("failed to load victim: {0}")]
    Load(#[from] WeightsError),
    #[error("invalid victim output: {0}")]
    InvalidOutput(String),
}

impl VictimError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, VictimError::Transport(_))
    }
}

/// Class probabilities `f_l(x)`, validated to be a distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    probs: Vec<f64>,
}

impl ClassifierOutput {
    pub fn new(probs: Vec<f64>) -> Result<Self, VictimError> {
        if probs.is_empty() {
            return Err(VictimError::InvalidOutput("empty probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(VictimError::InvalidOutput(format!(
                "probabilities must be finite and non-negative: {probs:?}"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(VictimError::InvalidOutput(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, class: usize) -> f64 {
        self.probs[class]
    }
}

/// Argmax with ties going to the lowest index.
pub fn predicted_class(out: &ClassifierOutput) -> usize {
    let mut best = 0;
    for (i, &p) in out.probs.iter().enumerate().skip(1) {
        if p > out.probs[best] {
            best = i;
        }
    }
    best
}

/// One detector candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<(), VictimError> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(VictimError::InvalidOutput(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if !self.bbox.is_valid() {
            return Err(VictimError::InvalidOutput(format!(
                "degenerate box {:?}",
                self.bbox
            )));
        }
        Ok(())
    }
}

/// Up to `B` candidates from one detector evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub candidates: Vec<Detection>,
}

impl DetectorOutput {
    pub fn new(candidates: Vec<Detection>) -> Result<Self, VictimError> {
        for c in &candidates {
            c.validate()?;
        }
        Ok(Self { candidates })
    }
}

/// Candidates with confidence strictly above 0.5; their count is `n(x)`.
pub fn detected_objects(out: &DetectorOutput) -> Vec<Detection> {
    out.candidates
        .iter()
        .filter(|d| d.confidence > DETECTION_THRESHOLD)
        .cloned()
        .collect()
}

pub fn object_count(out: &DetectorOutput) -> usize {
    out.candidates
        .iter()
        .filter(|d| d.confidence > DETECTION_THRESHOLD)
        .count()
}

/// Confidence of each original object in a new detector output.
///
/// Greedy one-to-one assignment by descending IoU over same-class pairs with
/// IoU ≥ 0.5. Unmatched objects get 0.0. Ties are broken on candidate content
/// (confidence, then box), never on candidate position.
pub fn match_confidences(orig: &[Detection], new_out: &DetectorOutput) -> Vec<f64> {
    let mut pairs = Vec::new();
    for (o, det) in orig.iter().enumerate() {
        for (k, cand) in new_out.candidates.iter().enumerate() {
            if cand.class_id != det.class_id {
                continue;
            }
            let overlap = iou(&det.bbox, &cand.bbox);
            if overlap >= MATCH_IOU {
                pairs.push((overlap, o, k));
            }
        }
    }
    let cands = &new_out.candidates;
    pairs.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(cands[b.2].confidence.total_cmp(&cands[a.2].confidence))
            .then(cands[a.2].bbox.cmp_coords(&cands[b.2].bbox))
    });
    let mut out = vec![0.0; orig.len()];
    let mut orig_used = vec![false; orig.len()];
    let mut cand_used = vec![false; cands.len()];
    for (_, o, k) in pairs {
        if orig_used[o] || cand_used[k] {
            continue;
        }
        orig_used[o] = true;
        cand_used[k] = true;
        out[o] = cands[k].confidence;
    }
    out
}

/// Monotone count of completed victim evaluations, shareable across threads.
#[derive(Debug, Clone, Default)]
pub struct QueryCounter(Arc<AtomicU64>);

impl QueryCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    fn bump(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

pub trait Classifier: Send + Sync {
    /// Expected input dimensions, or `None` when the victim accepts any.
    fn input_dims(&self) -> Option<Dims>;

    fn classify(&self, x: &Image) -> Result<ClassifierOutput, VictimError>;
}

pub trait Detector: Send + Sync {
    fn input_dims(&self) -> Option<Dims>;

    fn detect(&self, x: &Image) -> Result<DetectorOutput, VictimError>;
}

fn check_dims(expected: Option<Dims>, x: &Image) -> Result<(), VictimError> {
    match expected {
        Some(d) if d != x.dims() => Err(VictimError::DimMismatch {
            expected: d,
            got: x.dims(),
        }),
        _ => Ok(()),
    }
}

/// One counted classifier evaluation.
pub fn query_classifier(
    victim: &dyn Classifier,
    counter: &QueryCounter,
    x: &Image,
) -> Result<ClassifierOutput, VictimError> {
    check_dims(victim.input_dims(), x)?;
    let out = victim.classify(x)?;
    counter.bump();
    Ok(out)
}

/// One counted detector evaluation.
pub fn query_detector(
    victim: &dyn Detector,
    counter: &QueryCounter,
    x: &Image,
) -> Result<DetectorOutput, VictimError> {
    check_dims(victim.input_dims(), x)?;
    let out = victim.detect(x)?;
    counter.bump();
    Ok(out)
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
