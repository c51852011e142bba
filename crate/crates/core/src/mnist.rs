//! IDX container parsing, MNIST loading and stratified IID partitioning.
//!
//! IDX layout: two zero bytes, an element-type code, a dimension count, one
//! big-endian `u32` size per dimension, then the row-major payload. Only the
//! unsigned-byte element type (0x08) is supported, which is all MNIST uses.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const UNSIGNED_BYTE: u8 = 0x08;
pub const CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdxError {
    #[error("header shorter than {needed} bytes")]
    ShortHeader { needed: usize },
    #[error("malformed magic: leading bytes {0:#04x} {1:#04x} must be zero")]
    BadMagic(u8, u8),
    #[error("unsupported element type {0:#04x}")]
    UnsupportedType(u8),
    #[error("dimension sizes overflow")]
    Overflow,
    #[error("payload is {got} bytes, header declares {expected}")]
    PayloadLength { expected: usize, got: usize },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Idx { path: PathBuf, source: IdxError },
    #[error("{}: {detail}", path.display())]
    Shape { path: PathBuf, detail: String },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is out of range")]
    BadLabel { index: usize, label: u8 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub element_type: u8,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::ShortHeader { needed: 4 });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(IdxError::BadMagic(bytes[0], bytes[1]));
    }
    let element_type = bytes[2];
    if element_type != UNSIGNED_BYTE {
        return Err(IdxError::UnsupportedType(element_type));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(IdxError::ShortHeader { needed: header });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(IdxError::Overflow)?;
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(IdxError::PayloadLength {
            expected,
            got: payload.len(),
        });
    }
    Ok(IdxTensor {
        element_type,
        dims,
        data: payload.to_vec(),
    })
}

pub fn serialize_idx(tensor: &IdxTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * tensor.dims.len() + tensor.data.len());
    out.extend_from_slice(&[0, 0, tensor.element_type, tensor.dims.len() as u8]);
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&tensor.data);
    out
}

/// Images as rows of `width` reals in `[0, 1]`, one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    width: usize,
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(width: usize, images: Vec<f32>, labels: Vec<u8>) -> Result<Self, DataError> {
        if width == 0 || images.len() != width * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} values do not form {} rows of width {width}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self {
            width,
            images,
            labels,
        })
    }

    /// Builds a dataset from IDX image (`[n, rows, cols]`) and label (`[n]`)
    /// tensors, scaling pixels by 1/255.
    pub fn from_idx(images: &IdxTensor, labels: &IdxTensor) -> Result<Self, DataError> {
        let shape = |detail: String| DataError::Shape {
            path: PathBuf::new(),
            detail,
        };
        if images.dims.len() != 3 {
            return Err(shape(format!("images need 3 dims, got {:?}", images.dims)));
        }
        if labels.dims.len() != 1 {
            return Err(shape(format!("labels need 1 dim, got {:?}", labels.dims)));
        }
        if images.dims[0] != labels.dims[0] {
            return Err(DataError::CountMismatch {
                images: images.dims[0],
                labels: labels.dims[0],
            });
        }
        if let Some((index, &label)) = labels
            .data
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= CLASSES)
        {
            return Err(DataError::BadLabel { index, label });
        }
        let width = images.dims[1] * images.dims[2];
        let pixels = images.data.iter().map(|&p| p as f32 / 255.0).collect();
        Self::new(width, pixels, labels.data.clone())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.width..(i + 1) * self.width]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn class_histogram(&self) -> [usize; CLASSES] {
        let mut hist = [0; CLASSES];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_owned(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn locate(dir: &Path, name: &str) -> Result<PathBuf, DataError> {
    let plain = dir.join(name);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(DataError::MissingFile(plain))
}

/// Reads and parses one IDX file (plain or gzip).
pub fn read_idx_file(path: &Path) -> Result<IdxTensor, DataError> {
    let bytes = read_maybe_gz(path)?;
    parse_idx(&bytes).map_err(|source| DataError::Idx {
        path: path.to_owned(),
        source,
    })
}

fn load_pair(dir: &Path, images: &str, labels: &str) -> Result<LabeledDataset, DataError> {
    let images_path = locate(dir, images)?;
    let labels_path = locate(dir, labels)?;
    let images = read_idx_file(&images_path)?;
    let labels = read_idx_file(&labels_path)?;
    LabeledDataset::from_idx(&images, &labels).map_err(|e| match e {
        DataError::Shape { detail, .. } => DataError::Shape {
            path: images_path,
            detail,
        },
        other => other,
    })
}

/// Loads `(train, test)` from the four standard MNIST files in `dir`.
pub fn load_mnist(dir: &Path) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    if !dir.is_dir() {
        return Err(DataError::MissingFile(dir.to_owned()));
    }
    let train = load_pair(dir, TRAIN_IMAGES, TRAIN_LABELS)?;
    let test = load_pair(dir, TEST_IMAGES, TEST_LABELS)?;
    Ok((train, test))
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("cannot partition into zero parts")]
    ZeroParts,
    #[error("{parts} parts requested for only {samples} samples")]
    TooManyParts { parts: usize, samples: usize },
}

/// Disjoint, exhaustive assignment of sample indices to participants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub n_parts: usize,
    pub seed: u64,
    pub parts: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.parts.iter().map(Vec::len).collect()
    }
}

/// Stratified IID split: each class's indices are shuffled and dealt
/// round-robin over the parts. The dealing cursor carries over from one
/// class to the next, so part sizes differ by at most one as well.
pub fn stratified_partition(
    dataset: &LabeledDataset,
    n_parts: usize,
    seed: u64,
) -> Result<PartitionPlan, PartitionError> {
    if n_parts == 0 {
        return Err(PartitionError::ZeroParts);
    }
    if n_parts > dataset.len() {
        return Err(PartitionError::TooManyParts {
            parts: n_parts,
            samples: dataset.len(),
        });
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASSES];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = vec![Vec::with_capacity(dataset.len() / n_parts + 1); n_parts];
    let mut cursor = 0;
    for mut indices in by_class {
        indices.shuffle(&mut rng);
        for i in indices {
            parts[cursor].push(i);
            cursor = (cursor + 1) % n_parts;
        }
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    Ok(PartitionPlan {
        n_parts,
        seed,
        parts,
    })
}
