//! Dense C×H×W images, pixel actions and sparse perturbations.
//!
//! Brightness is normalized to `[0, 1]`; 8-bit files map `v -> v / 255`.
//! Layout is row-major `(channel, row, col)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Brightness used by a "Write" action.
pub const WRITE: f64 = 1.0;
/// Brightness used by an "Erase" action.
pub const ERASE: f64 = 0.0;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid dimensions {channels}x{height}x{width}")]
    InvalidDims {
        channels: usize,
        height: usize,
        width: usize,
    },
    #[error("data length {got} does not match {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("action {index} at ({row}, {col}) is outside a {height}x{width} image")]
    ActionOutOfBounds {
        index: usize,
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
    #[error("action {index} carries {got} channel values, image has {expected}")]
    ActionChannels {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("action value {0} is neither 0.0 nor 1.0")]
    ActionValue(f64),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch(Dims, Dims),
    #[error("perturbation coordinate {0:?} outside image bounds")]
    EntryOutOfBounds((usize, usize, usize)),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("decode error on {path}: {message}")]
    Decode { path: String, message: String },
}

/// Channel, height and width of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.height + row) * self.width + col
    }

    /// Inverse of [`Dims::index`].
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let col = index % self.width;
        let row = (index / self.width) % self.height;
        let channel = index / (self.width * self.height);
        (channel, row, col)
    }
}

/// A dense image with brightness values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    dims: Dims,
    data: Vec<f64>,
}

impl Image {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self, ImageError> {
        if dims.is_empty() {
            return Err(ImageError::InvalidDims {
                channels: dims.channels,
                height: dims.height,
                width: dims.width,
            });
        }
        if data.len() != dims.len() {
            return Err(ImageError::DataLength {
                expected: dims.len(),
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::OutOfRange { index, value });
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: f64) -> Result<Self, ImageError> {
        Self::new(dims, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.dims.channels
    }

    pub fn height(&self) -> usize {
        self.dims.height
    }

    pub fn width(&self) -> usize {
        self.dims.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[self.dims.index(channel, row, col)]
    }

    /// Quantize to 8-bit, `round(v * 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_bytes(dims: Dims, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::new(dims, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }
}

/// One pixel overwrite: every channel at `(row, col)` takes `values[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelAction {
    pub row: usize,
    pub col: usize,
    pub values: Vec<f64>,
}

impl PixelAction {
    pub fn new(row: usize, col: usize, values: Vec<f64>) -> Result<Self, ImageError> {
        if let Some(&v) = values.iter().find(|&&v| v != WRITE && v != ERASE) {
            return Err(ImageError::ActionValue(v));
        }
        Ok(Self { row, col, values })
    }
}

/// The ordered action set applied in one epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    pub actions: Vec<PixelAction>,
}

impl ActionSet {
    pub fn new(actions: Vec<PixelAction>) -> Self {
        Self { actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Overwrites each action's pixel in order; later actions win on collisions.
pub fn apply_actions(x: &Image, set: &ActionSet) -> Result<Image, ImageError> {
    let dims = x.dims;
    let mut data = x.data.clone();
    for (index, action) in set.actions.iter().enumerate() {
        if action.row >= dims.height || action.col >= dims.width {
            return Err(ImageError::ActionOutOfBounds {
                index,
                row: action.row,
                col: action.col,
                height: dims.height,
                width: dims.width,
            });
        }
        if action.values.len() != dims.channels {
            return Err(ImageError::ActionChannels {
                index,
                expected: dims.channels,
                got: action.values.len(),
            });
        }
        for (channel, &v) in action.values.iter().enumerate() {
            if v != WRITE && v != ERASE {
                return Err(ImageError::ActionValue(v));
            }
            data[dims.index(channel, action.row, action.col)] = v;
        }
    }
    Ok(Image { dims, data })
}

/// Sparse difference between a clean image and its perturbed version.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    /// Dimensions of the clean image the entries refer to.
    pub dims: Dims,
    /// `(channel, row, col) -> new value`, only where the value changed.
    pub entries: BTreeMap<(usize, usize, usize), f64>,
}

impl Perturbation {
    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Applies the entries on top of `x`.
    pub fn apply(&self, x: &Image) -> Result<Image, ImageError> {
        let dims = x.dims();
        if self.dims != dims {
            return Err(ImageError::DimMismatch(self.dims, dims));
        }
        let mut data = x.data.clone();
        for (&(c, r, k), &v) in &self.entries {
            if c >= dims.channels || r >= dims.height || k >= dims.width {
                return Err(ImageError::EntryOutOfBounds((c, r, k)));
            }
            data[dims.index(c, r, k)] = v;
        }
        Image::new(dims, data)
    }
}

/// Entries exactly where `perturbed` differs from `clean`.
pub fn diff_perturbation(clean: &Image, perturbed: &Image) -> Result<Perturbation, ImageError> {
    if clean.dims != perturbed.dims {
        return Err(ImageError::DimMismatch(clean.dims, perturbed.dims));
    }
    let dims = clean.dims;
    let entries = clean
        .data
        .iter()
        .zip(&perturbed.data)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(i, (_, &b))| (dims.coords(i), b))
        .collect();
    Ok(Perturbation { dims, entries })
}

/// Loads an 8-bit PNG (gray or RGB) or the raw `C H W\n` + bytes format.
///
/// Files ending in `.raw` are read as raw; everything else goes through the
/// PNG decoder.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if is_raw(path) {
        return decode_raw(&bytes).map_err(|message| ImageError::Decode {
            path: path.display().to_string(),
            message,
        });
    }
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(
        |e| ImageError::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        },
    )?;
    let decode_err = |message: String| ImageError::Decode {
        path: path.display().to_string(),
        message,
    };
    match decoded {
        image::DynamicImage::ImageLuma8(buf) => {
            let dims = Dims::new(1, buf.height() as usize, buf.width() as usize);
            Image::from_bytes(dims, buf.as_raw())
        }
        image::DynamicImage::ImageRgb8(buf) => {
            let dims = Dims::new(3, buf.height() as usize, buf.width() as usize);
            Image::from_bytes(dims, &interleaved_to_planar(buf.as_raw(), dims))
        }
        other => Err(decode_err(format!(
            "unsupported pixel format {:?}; expected 8-bit gray or RGB",
            other.color()
        ))),
    }
}

/// Saves as PNG (1 or 3 channels) or raw when the extension is `.raw`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let io_err = |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    };
    let dims = img.dims();
    if is_raw(path) {
        let mut out = format!("{} {} {}\n", dims.channels, dims.height, dims.width).into_bytes();
        out.extend(img.to_bytes());
        let mut f = fs::File::create(path).map_err(io_err)?;
        return f.write_all(&out).map_err(io_err);
    }
    let (w, h) = (dims.width as u32, dims.height as u32);
    let encoded = match dims.channels {
        1 => image::GrayImage::from_raw(w, h, img.to_bytes()).map(image::DynamicImage::ImageLuma8),
        3 => image::RgbImage::from_raw(w, h, planar_to_interleaved(&img.to_bytes(), dims))
            .map(image::DynamicImage::ImageRgb8),
        c => {
            return Err(ImageError::Decode {
                path: path.display().to_string(),
                message: format!("cannot encode {c} channels as PNG; use .raw"),
            })
        }
    };
    let encoded = encoded.expect("buffer length matches dims");
    encoded
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| ImageError::Decode {
            path: path.display().to_string(),
            message: e.to_string(),
        })
}

fn is_raw(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("raw"))
}

fn decode_raw(bytes: &[u8]) -> Result<Image, String> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or("missing header line")?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|e| e.to_string())?;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|s| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [c, h, w] = fields[..] else {
        return Err(format!("header must be `C H W`, got {header:?}"));
    };
    let dims = Dims::new(c, h, w);
    let body = &bytes[newline + 1..];
    if body.len() != dims.len() {
        return Err(format!("expected {} bytes, found {}", dims.len(), body.len()));
    }
    Image::from_bytes(dims, body).map_err(|e| e.to_string())
}

fn interleaved_to_planar(raw: &[u8], dims: Dims) -> Vec<u8> {
    let mut out = vec![0u8; dims.len()];
    for r in 0..dims.height {
        for k in 0..dims.width {
            for c in 0..dims.channels {
                out[dims.index(c, r, k)] = raw[(r * dims.width + k) * dims.channels + c];
            }
        }
    }
    out
}

fn planar_to_interleaved(planar: &[u8], dims: Dims) -> Vec<u8> {
    let mut out = vec![0u8; dims.len()];
    for r in 0..dims.height {
        for k in 0..dims.width {
            for c in 0..dims.channels {
                out[(r * dims.width + k) * dims.channels + c] = planar[dims.index(c, r, k)];
            }
        }
    }
    out
}
