//! Tensor container format.
//!
//! Layout: the magic bytes `STPG`, one version byte, a single-line JSON
//! header `{"dtype":"f32"|"u8","shape":[...]}` terminated by `\n`, then the
//! row-major little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Image, LabelMap, ProbabilityMap, TensorError};

pub const MAGIC: &[u8; 4] = b"STPG";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("zero-size dimension in shape {0:?}")]
    ZeroSizeDimension(Vec<usize>),
    #[error("dtype mismatch: expected {expected}, found {found}")]
    DTypeMismatch {
        expected: &'static str,
        found: &'static str,
    },
    #[error("invalid tensor contents: {0}")]
    Invalid(#[from] TensorError),
}

impl FormatError {
    /// Stable numeric code for each failure class.
    pub fn code(&self) -> i32 {
        match self {
            FormatError::Io(_) => 10,
            FormatError::BadMagic => 11,
            FormatError::UnsupportedVersion(_) => 12,
            FormatError::MalformedHeader(_) => 13,
            FormatError::ShapeMismatch { .. } => 14,
            FormatError::Truncated { .. } => 15,
            FormatError::TrailingBytes(_) => 16,
            FormatError::ZeroSizeDimension(_) => 17,
            FormatError::DTypeMismatch { .. } => 18,
            FormatError::Invalid(_) => 19,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::U8 => "u8",
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: DType,
    shape: Vec<usize>,
}

/// A decoded tensor of either supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::U8(a) => a.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Tensor::F32(_) => DType::F32,
            Tensor::U8(_) => DType::U8,
        }
    }

    pub fn into_f32(self) -> Result<ArrayD<f32>, FormatError> {
        match self {
            Tensor::F32(a) => Ok(a),
            other => Err(FormatError::DTypeMismatch {
                expected: "f32",
                found: other.dtype().name(),
            }),
        }
    }

    pub fn into_u8(self) -> Result<ArrayD<u8>, FormatError> {
        match self {
            Tensor::U8(a) => Ok(a),
            other => Err(FormatError::DTypeMismatch {
                expected: "u8",
                found: other.dtype().name(),
            }),
        }
    }
}

fn encode_header(dtype: DType, shape: &[usize]) -> Result<Vec<u8>, FormatError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(FormatError::ZeroSizeDimension(shape.to_vec()));
    }
    let header = serde_json::to_string(&Header {
        dtype,
        shape: shape.to_vec(),
    })
    .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 1 + header.len() + 1);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    Ok(out)
}

/// Encodes `f32` data of the given shape.
pub fn encode_f32(shape: &[usize], data: &[f32]) -> Result<Vec<u8>, FormatError> {
    check_len(shape, data.len())?;
    let mut out = encode_header(DType::F32, shape)?;
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Encodes `u8` data of the given shape.
pub fn encode_u8(shape: &[usize], data: &[u8]) -> Result<Vec<u8>, FormatError> {
    check_len(shape, data.len())?;
    let mut out = encode_header(DType::U8, shape)?;
    out.extend_from_slice(data);
    Ok(out)
}

fn check_len(shape: &[usize], len: usize) -> Result<(), FormatError> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(FormatError::ShapeMismatch {
            expected: shape.to_vec(),
            found: vec![len],
        });
    }
    Ok(())
}

pub fn encode(tensor: &Tensor) -> Result<Vec<u8>, FormatError> {
    match tensor {
        Tensor::F32(a) => {
            let a = a.as_standard_layout();
            encode_f32(a.shape(), a.as_slice().unwrap())
        }
        Tensor::U8(a) => {
            let a = a.as_standard_layout();
            encode_u8(a.shape(), a.as_slice().unwrap())
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, FormatError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = *bytes
        .get(MAGIC.len())
        .ok_or_else(|| FormatError::MalformedHeader("missing version byte".into()))?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let rest = &bytes[MAGIC.len() + 1..];
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| FormatError::MalformedHeader("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&rest[..newline])
        .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
    if header.shape.is_empty() || header.shape.contains(&0) {
        return Err(FormatError::ZeroSizeDimension(header.shape));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::MalformedHeader("shape overflows".into()))?;
    let payload = &rest[newline + 1..];
    let expected = count * header.dtype.width();
    if payload.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(FormatError::TrailingBytes(payload.len() - expected));
    }
    let shape = IxDyn(&header.shape);
    Ok(match header.dtype {
        DType::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::F32(ArrayD::from_shape_vec(shape, data).expect("length checked"))
        }
        DType::U8 => Tensor::U8(ArrayD::from_shape_vec(shape, payload.to_vec()).expect("length checked")),
    })
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<(), FormatError> {
    let bytes = encode(tensor)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, FormatError> {
    decode(&fs::read(path)?)
}

/// Reads an `f32` tensor and checks it has exactly `expected` shape.
pub fn read_f32_shaped(path: impl AsRef<Path>, expected: &[usize]) -> Result<ArrayD<f32>, FormatError> {
    let a = read_tensor(path)?.into_f32()?;
    if a.shape() != expected {
        return Err(FormatError::ShapeMismatch {
            expected: expected.to_vec(),
            found: a.shape().to_vec(),
        });
    }
    Ok(a)
}

fn to_rank<T, D: ndarray::Dimension>(a: ArrayD<T>, rank: usize) -> Result<ndarray::Array<T, D>, FormatError> {
    let found = a.shape().to_vec();
    a.into_dimensionality::<D>().map_err(|_| FormatError::ShapeMismatch {
        expected: vec![0; rank],
        found,
    })
}

pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<(), FormatError> {
    write_tensor(path, &Tensor::F32(image.data().clone().into_dyn()))
}

pub fn read_image(path: impl AsRef<Path>, id: impl Into<String>) -> Result<Image, FormatError> {
    let a: Array3<f32> = to_rank(read_tensor(path)?.into_f32()?, 3)?;
    Ok(Image::new(id, a)?)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<(), FormatError> {
    write_tensor(path, &Tensor::U8(labels.data().clone().into_dyn()))
}

pub fn read_labels(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelMap, FormatError> {
    let a: Array2<u8> = to_rank(read_tensor(path)?.into_u8()?, 2)?;
    Ok(LabelMap::new(a, num_classes)?)
}

pub fn write_probabilities(path: impl AsRef<Path>, p: &ProbabilityMap) -> Result<(), FormatError> {
    write_tensor(path, &Tensor::F32(p.data().clone().into_dyn()))
}

pub fn read_probabilities(path: impl AsRef<Path>) -> Result<ProbabilityMap, FormatError> {
    let a: Array3<f32> = to_rank(read_tensor(path)?.into_f32()?, 3)?;
    Ok(ProbabilityMap::new(a)?)
}
