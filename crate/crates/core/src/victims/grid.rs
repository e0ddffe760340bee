//! Synthetic grid detector.
//!
//! The image is tiled into `cell_size × cell_size` cells (edge cells may be
//! smaller). Each cell yields one candidate whose class is the brightest
//! channel and whose confidence is `sigmoid(gain · (mean − channel_threshold))`
//! for that channel's mean brightness in the cell.

use crate::image::{Dims, Image};
use crate::metrics::BBox;

use super::{Detection, Detector, DetectorOutput, VictimError};

pub const DEFAULT_GAIN: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct GridDetector {
    cell_size: usize,
    channel_threshold: f64,
    gain: f64,
    dims: Option<Dims>,
}

impl GridDetector {
    pub fn new(cell_size: usize, channel_threshold: f64) -> Result<Self, VictimError> {
        Self::with_gain(cell_size, channel_threshold, DEFAULT_GAIN)
    }

    pub fn with_gain(
        cell_size: usize,
        channel_threshold: f64,
        gain: f64,
    ) -> Result<Self, VictimError> {
        if cell_size == 0 || !gain.is_finite() || gain <= 0.0 || !channel_threshold.is_finite() {
            return Err(VictimError::InvalidOutput(format!(
                "grid detector needs cell_size ≥ 1 and a finite positive gain \
                 (cell_size={cell_size}, gain={gain}, threshold={channel_threshold})"
            )));
        }
        Ok(Self {
            cell_size,
            channel_threshold,
            gain,
            dims: None,
        })
    }

    /// Restricts accepted inputs to `dims`.
    pub fn expecting(mut self, dims: Dims) -> Self {
        self.dims = Some(dims);
        self
    }

    pub fn cell_size(&self) -> usize {
        self.cell_size
    }

    /// Confidence for a cell whose dominant channel has mean brightness `mean`.
    pub fn confidence(&self, mean: f64) -> f64 {
        1.0 / (1.0 + (-self.gain * (mean - self.channel_threshold)).exp())
    }
}

impl Detector for GridDetector {
    fn input_dims(&self) -> Option<Dims> {
        self.dims
    }

    fn detect(&self, x: &Image) -> Result<DetectorOutput, VictimError> {
        let d = x.dims();
        let s = self.cell_size;
        let mut candidates = Vec::new();
        for r0 in (0..d.height).step_by(s) {
            for k0 in (0..d.width).step_by(s) {
                let r1 = (r0 + s).min(d.height);
                let k1 = (k0 + s).min(d.width);
                let area = ((r1 - r0) * (k1 - k0)) as f64;
                let mut best = (0, f64::NEG_INFINITY);
                for c in 0..d.channels {
                    let mut sum = 0.0;
                    for r in r0..r1 {
                        for k in k0..k1 {
                            sum += x.get(c, r, k);
                        }
                    }
                    let mean = sum / area;
                    if mean > best.1 {
                        best = (c, mean);
                    }
                }
                candidates.push(Detection {
                    bbox: BBox::new(k0 as f64, r0 as f64, k1 as f64, r1 as f64),
                    class_id: best.0,
                    confidence: self.confidence(best.1),
                });
            }
        }
        DetectorOutput::new(candidates)
    }
}
