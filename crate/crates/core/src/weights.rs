//! Flat little-endian float tensor files.
//!
//! Layout (all integers `u32` little-endian):
//!
//! ```text
//! magic  b"RFPW"
//! version = 1
//! count                      number of tensors
//! repeat count times:
//!   name_len, name (UTF-8)
//!   ndim, dims[ndim]
//!   prod(dims) × f32 (little-endian)
//! ```
//!
//! Used for victim weights (`tiny_cnn`, `linear_softmax`) and for policy
//! parameter dumps.

use std::fs;
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 4] = b"RFPW";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed weights file: {0}")]
    Malformed(String),
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Self {
        Self::new(name, shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightFile {
    pub tensors: Vec<Tensor>,
}

impl WeightFile {
    pub fn get(&self, name: &str) -> Result<&Tensor, WeightsError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| WeightsError::Missing(name.to_string()))
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor, WeightsError> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(WeightsError::Shape {
                name: name.to_string(),
                expected: shape.to_vec(),
                got: t.shape.clone(),
            });
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(WeightsError::Malformed("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(WeightsError::Malformed(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| WeightsError::Malformed(format!("tensor name: {e}")))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| WeightsError::Malformed(format!("{name}: shape overflow")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| {
                WeightsError::Malformed(format!("{name}: shape overflow"))
            })?)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(WeightsError::Malformed(format!("{name}: non-finite value")));
            }
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(WeightsError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { tensors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeightsError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeightsError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| WeightsError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_garbage() {
        assert!(WeightFile::from_bytes(b"nope").is_err());
        let mut good = WeightFile {
            tensors: vec![Tensor::new("w", vec![2], vec![1.0, 2.0])],
        }
        .to_bytes();
        good.pop();
        assert!(matches!(
            WeightFile::from_bytes(&good),
            Err(WeightsError::Malformed(_))
        ));
    }

    #[test]
    fn shape_and_missing_checks() {
        let f = WeightFile {
            tensors: vec![Tensor::new("w", vec![2, 1], vec![1.0, 2.0])],
        };
        assert!(f.expect("w", &[2, 1]).is_ok());
        assert!(matches!(f.expect("w", &[2]), Err(WeightsError::Shape { .. })));
        assert!(matches!(f.get("b"), Err(WeightsError::Missing(_))));
    }

    proptest! {
        #[test]
        fn byte_round_trip(data in proptest::collection::vec(-1e6f32..1e6, 0..40), name in "[a-z_]{1,12}") {
            let f = WeightFile { tensors: vec![
                Tensor::new(name, vec![data.len()], data.clone()),
                Tensor::new("scalar", vec![], vec![0.5]),
            ]};
            prop_assert_eq!(WeightFile::from_bytes(&f.to_bytes()).unwrap(), f);
        }
    }
}
