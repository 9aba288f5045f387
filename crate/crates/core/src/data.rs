//! IDX ingestion, area-average downsampling, and the labeled image set.
//!
//! IDX files start with a big-endian magic (`0x00000803` for `u8` image
//! tensors, `0x00000801` for `u8` label vectors), then one big-endian `u32`
//! per dimension, then the raw bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad_engine::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SOURCE_SIDE: usize = 28;
/// Sides [`downsample`] can produce from 28x28 sources.
pub const DOWNSAMPLE_SIDES: [usize; 4] = [8, 14, 16, 28];
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: {extra} unexpected trailing bytes after {expected}")]
    TrailingBytes {
        path: PathBuf,
        expected: usize,
        extra: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is not a digit class")]
    BadLabel { index: usize, label: u8 },
    #[error("unsupported image side {side}; supported sides are {supported:?}")]
    UnsupportedSide { side: usize, supported: Vec<usize> },
    #[error("requested {requested} examples but only {available} are available")]
    Subset { requested: usize, available: usize },
    #[error("invalid dataset specification: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A parsed `u8` IDX tensor: dimension sizes and raw bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes(b[..4].try_into().expect("4 bytes"))
}

/// Parses an IDX byte buffer with the given magic; `path` only labels errors.
pub fn parse_idx(bytes: &[u8], magic: u32, path: &Path) -> Result<IdxArray, DataError> {
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let found = be_u32(&bytes[..4]);
    if found != magic {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < header {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndim).map(|i| be_u32(&bytes[4 + 4 * i..]) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes {
            path: path.to_path_buf(),
            expected,
            extra: bytes.len() - expected,
        });
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read_idx(path: &Path, magic: u32) -> Result<IdxArray, DataError> {
    parse_idx(&fs::read(path).map_err(io_err(path))?, magic, path)
}

pub fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    assert_eq!((magic & 0xff) as usize, dims.len(), "magic encodes the rank");
    assert_eq!(dims.iter().product::<usize>(), data.len(), "dims must match data");
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&u32::try_from(d).expect("IDX dims fit in u32").to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Writes `count` images of `rows x cols` bytes.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<(), DataError> {
    let count = pixels.len() / (rows * cols).max(1);
    fs::write(path, encode_idx(IMAGE_MAGIC, &[count, rows, cols], pixels)).map_err(io_err(path))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    fs::write(path, encode_idx(LABEL_MAGIC, &[labels.len()], labels)).map_err(io_err(path))
}

/// Square single-channel images with digit labels, pixels as `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub side: usize,
    /// Row-major, `len() * side * side` values.
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn plane(&self) -> usize {
        self.side * self.side
    }

    /// Image `i` as `[1, 1, side, side]`.
    pub fn image(&self, i: usize) -> Tensor {
        let px = self.pixels[i * self.plane()..][..self.plane()].to_vec();
        Tensor::new(vec![1, 1, self.side, self.side], px).expect("image shape")
    }

    pub fn images(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    /// The listed images stacked as `[k, 1, side, side]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut px = Vec::with_capacity(indices.len() * self.plane());
        for &i in indices {
            px.extend_from_slice(&self.pixels[i * self.plane()..][..self.plane()]);
        }
        Tensor::new(vec![indices.len(), 1, self.side, self.side], px).expect("batch shape")
    }

    pub fn select(&self, indices: &[usize]) -> LabeledImages {
        LabeledImages {
            side: self.side,
            pixels: self.batch(indices).into_data(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Result<LabeledImages, DataError> {
        if n > self.len() {
            return Err(DataError::Subset {
                requested: n,
                available: self.len(),
            });
        }
        Ok(self.select(&(0..n).collect::<Vec<_>>()))
    }

    pub fn filter_classes(&self, classes: &[u8]) -> LabeledImages {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.select(&keep)
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Reads an image/label IDX pair, scaling bytes `0..=255` linearly onto
/// `range`.
pub fn load_idx(images: &Path, labels: &Path, range: (f64, f64)) -> Result<LabeledImages, DataError> {
    let img = read_idx(images, IMAGE_MAGIC)?;
    let lab = read_idx(labels, LABEL_MAGIC)?;
    let (count, rows, cols) = (img.dims[0], img.dims[1], img.dims[2]);
    if rows != cols {
        return Err(DataError::Invalid(format!("{}: images are {rows}x{cols}, not square", images.display())));
    }
    if count != lab.dims[0] {
        return Err(DataError::CountMismatch {
            images: count,
            labels: lab.dims[0],
        });
    }
    if let Some(index) = lab.data.iter().position(|&l| l as usize >= NUM_CLASSES) {
        return Err(DataError::BadLabel {
            index,
            label: lab.data[index],
        });
    }
    let (lo, hi) = range;
    let pixels = img.data.iter().map(|&b| lo + (hi - lo) * f64::from(b) / 255.0).collect();
    Ok(LabeledImages {
        side: rows,
        pixels,
        labels: lab.data,
    })
}

/// Fraction of source cell `k` covered by target cell `i` when `from`
/// cells are spread over `to` cells, normalized so each row sums to one.
fn area_weights(from: usize, to: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = from as f64 / to as f64;
    (0..to)
        .map(|i| {
            let (a, b) = (i as f64 * ratio, (i + 1) as f64 * ratio);
            (a.floor() as usize..(b.ceil() as usize).min(from))
                .filter_map(|k| {
                    let overlap = b.min(k as f64 + 1.0) - a.max(k as f64);
                    (overlap > 0.0).then_some((k, overlap / ratio))
                })
                .collect()
        })
        .collect()
}

/// Area-average pooling of every image to `side x side`. Each output pixel
/// is a convex combination of input pixels, so values stay in range.
pub fn downsample(data: &LabeledImages, side: usize) -> Result<LabeledImages, DataError> {
    if !DOWNSAMPLE_SIDES.contains(&side) || data.side != SOURCE_SIDE {
        return Err(DataError::UnsupportedSide {
            side,
            supported: DOWNSAMPLE_SIDES.to_vec(),
        });
    }
    if side == data.side {
        return Ok(data.clone());
    }
    let w = area_weights(data.side, side);
    let src = data.side;
    let mut pixels = Vec::with_capacity(data.len() * side * side);
    let mut rows = vec![0.0; side * src];
    for img in data.pixels.chunks_exact(src * src) {
        // Rows first, then columns.
        for (i, wi) in w.iter().enumerate() {
            for c in 0..src {
                rows[i * src + c] = wi.iter().map(|&(k, a)| a * img[k * src + c]).sum();
            }
        }
        for i in 0..side {
            for wj in &w {
                pixels.push(wj.iter().map(|&(k, a)| a * rows[i * src + k]).sum());
            }
        }
    }
    Ok(LabeledImages {
        side,
        pixels,
        labels: data.labels.clone(),
    })
}

/// Where a dataset comes from and how it is shaped for training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Directory holding the four canonical MNIST IDX files.
    pub source: PathBuf,
    pub image_side: usize,
    /// Leading examples to keep; `None` keeps all.
    pub subset: Option<usize>,
    /// Classes to keep; `None` keeps all.
    pub classes: Option<Vec<u8>>,
    pub range: (f64, f64),
}

/// Supported training sides.
pub const TRAINING_SIDES: [usize; 3] = [8, 16, 28];

impl DatasetSpec {
    pub fn new(source: impl Into<PathBuf>, image_side: usize) -> Self {
        Self {
            source: source.into(),
            image_side,
            subset: None,
            classes: None,
            range: (-1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !TRAINING_SIDES.contains(&self.image_side) {
            return Err(DataError::UnsupportedSide {
                side: self.image_side,
                supported: TRAINING_SIDES.to_vec(),
            });
        }
        if !(self.range.0 < self.range.1) {
            return Err(DataError::Invalid(format!("empty pixel range {:?}", self.range)));
        }
        Ok(())
    }

    pub fn paths(&self, train: bool) -> (PathBuf, PathBuf) {
        let prefix = if train { "train" } else { "t10k" };
        (
            self.source.join(format!("{prefix}-images-idx3-ubyte")),
            self.source.join(format!("{prefix}-labels-idx1-ubyte")),
        )
    }

    /// Loads the train or test split: class filter, then subset, then
    /// downsampling.
    pub fn load(&self, train: bool) -> Result<LabeledImages, DataError> {
        self.validate()?;
        let (images, labels) = self.paths(train);
        let mut data = load_idx(&images, &labels, self.range)?;
        if let Some(classes) = &self.classes {
            data = data.filter_classes(classes);
        }
        if let Some(n) = self.subset {
            data = data.take(n)?;
        }
        downsample(&data, self.image_side)
    }
}
