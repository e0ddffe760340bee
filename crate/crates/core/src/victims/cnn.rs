//! Tiny CNN classifier: conv3×3 (pad 1) → ReLU → maxpool 2×2 → dense → softmax.
//!
//! Weight tensors (see [`crate::weights`]):
//! `input_shape [3]`, `conv.weight [K, C, 3, 3]`, `conv.bias [K]`,
//! `fc.weight [classes, K·(H/2)·(W/2)]`, `fc.bias [classes]`.
//! The flatten order is `(filter, row, col)`.

use std::path::Path;

use crate::image::{Dims, Image};
use crate::nn;
use crate::weights::{Tensor, WeightFile};

use super::linear::{input_shape_tensor, read_input_shape};
use super::{softmax, Classifier, ClassifierOutput, VictimError};

#[derive(Debug, Clone)]
pub struct TinyCnn {
    dims: Dims,
    filters: usize,
    classes: usize,
    conv_w: Vec<f64>,
    conv_b: Vec<f64>,
    fc_w: Vec<f64>,
    fc_b: Vec<f64>,
}

impl TinyCnn {
    pub fn from_weights(file: &WeightFile) -> Result<Self, VictimError> {
        let dims = read_input_shape(file)?;
        let conv_b = file.get("conv.bias")?;
        let filters = conv_b.data.len();
        let conv_w = file.expect("conv.weight", &[filters, dims.channels, 3, 3])?;
        let fc_b = file.get("fc.bias")?;
        let classes = fc_b.data.len();
        let pooled = filters * (dims.height / 2) * (dims.width / 2);
        let fc_w = file.expect("fc.weight", &[classes, pooled])?;
        Ok(Self {
            dims,
            filters,
            classes,
            conv_w: conv_w.to_f64(),
            conv_b: conv_b.to_f64(),
            fc_w: fc_w.to_f64(),
            fc_b: fc_b.to_f64(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VictimError> {
        Self::from_weights(&WeightFile::load(path)?)
    }

    pub fn to_weights(&self) -> WeightFile {
        let d = self.dims;
        WeightFile {
            tensors: vec![
                input_shape_tensor(d),
                Tensor::from_f64("conv.weight", vec![self.filters, d.channels, 3, 3], &self.conv_w),
                Tensor::from_f64("conv.bias", vec![self.filters], &self.conv_b),
                Tensor::from_f64(
                    "fc.weight",
                    vec![self.classes, self.fc_w.len() / self.classes],
                    &self.fc_w,
                ),
                Tensor::from_f64("fc.bias", vec![self.classes], &self.fc_b),
            ],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn logits(&self, x: &Image) -> Vec<f64> {
        let d = self.dims;
        let (h, w) = (d.height, d.width);
        let (cols, _, _) = nn::im2col(x.data(), d.channels, h, w, 1);
        let mut conv = nn::conv_cols(&cols, h * w, &self.conv_w, &self.conv_b);
        for v in &mut conv {
            *v = v.max(0.0);
        }
        let (ph, pw) = (h / 2, w / 2);
        let mut pooled = vec![0.0; self.filters * ph * pw];
        for f in 0..self.filters {
            for r in 0..ph {
                for k in 0..pw {
                    let at = |dr: usize, dk: usize| conv[(f * h + 2 * r + dr) * w + 2 * k + dk];
                    pooled[(f * ph + r) * pw + k] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                }
            }
        }
        let n = pooled.len();
        (0..self.classes)
            .map(|j| {
                let row = &self.fc_w[j * n..(j + 1) * n];
                self.fc_b[j] + nn::dot(row, &pooled)
            })
            .collect()
    }
}

impl Classifier for TinyCnn {
    fn input_dims(&self) -> Option<Dims> {
        Some(self.dims)
    }

    fn classify(&self, x: &Image) -> Result<ClassifierOutput, VictimError> {
        ClassifierOutput::new(softmax(&self.logits(x)))
    }
}
