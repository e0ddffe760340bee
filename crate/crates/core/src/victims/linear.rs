//! Linear softmax classifier: `softmax(W·x + b)` over the flattened image.

use std::path::Path;

use crate::image::{Dims, Image};
use crate::weights::{Tensor, WeightFile, WeightsError};

use super::{softmax, Classifier, ClassifierOutput, VictimError};

#[derive(Debug, Clone)]
pub struct LinearSoftmax {
    dims: Dims,
    classes: usize,
    /// `classes × dims.len()`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearSoftmax {
    pub fn new(dims: Dims, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self, VictimError> {
        let classes = bias.len();
        if classes == 0 || weight.len() != classes * dims.len() {
            return Err(VictimError::Load(WeightsError::Malformed(format!(
                "linear weight has {} values for {classes} classes over {} inputs",
                weight.len(),
                dims.len()
            ))));
        }
        Ok(Self {
            dims,
            classes,
            weight,
            bias,
        })
    }

    /// All-zero weights and biases; always predicts the uniform distribution.
    pub fn zeros(dims: Dims, classes: usize) -> Self {
        Self {
            dims,
            classes,
            weight: vec![0.0; classes * dims.len()],
            bias: vec![0.0; classes],
        }
    }

    /// Reads tensors `input_shape` `[3]`, `weight` `[classes, C·H·W]`, `bias` `[classes]`.
    pub fn from_weights(file: &WeightFile) -> Result<Self, VictimError> {
        let dims = read_input_shape(file)?;
        let bias = file.get("bias")?;
        let classes = bias.data.len();
        let weight = file.expect("weight", &[classes, dims.len()])?;
        Self::new(dims, weight.to_f64(), bias.to_f64())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VictimError> {
        Self::from_weights(&WeightFile::load(path)?)
    }

    pub fn to_weights(&self) -> WeightFile {
        WeightFile {
            tensors: vec![
                input_shape_tensor(self.dims),
                Tensor::from_f64("weight", vec![self.classes, self.dims.len()], &self.weight),
                Tensor::from_f64("bias", vec![self.classes], &self.bias),
            ],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn logits(&self, x: &Image) -> Vec<f64> {
        let n = self.dims.len();
        (0..self.classes)
            .map(|k| {
                let row = &self.weight[k * n..(k + 1) * n];
                self.bias[k] + row.iter().zip(x.data()).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

impl Classifier for LinearSoftmax {
    fn input_dims(&self) -> Option<Dims> {
        Some(self.dims)
    }

    fn classify(&self, x: &Image) -> Result<ClassifierOutput, VictimError> {
        ClassifierOutput::new(softmax(&self.logits(x)))
    }
}

pub(super) fn read_input_shape(file: &WeightFile) -> Result<Dims, VictimError> {
    let t = file.expect("input_shape", &[3])?;
    let v: Vec<usize> = t.data.iter().map(|&f| f as usize).collect();
    if v.iter().any(|&d| d == 0) || t.data.iter().any(|f| f.fract() != 0.0) {
        return Err(VictimError::Load(WeightsError::Malformed(format!(
            "bad input_shape {:?}",
            t.data
        ))));
    }
    Ok(Dims::new(v[0], v[1], v[2]))
}

pub(super) fn input_shape_tensor(dims: Dims) -> Tensor {
    Tensor::new(
        "input_shape",
        vec![3],
        vec![dims.channels as f32, dims.height as f32, dims.width as f32],
    )
}
