//! Dense per-pixel maps shared by every stage of the pipeline.
//!
//! All maps are stored as `ndarray` arrays indexed `[x, y, channel]` with
//! shape `[W, H, C]` in row-major order, so the linear pixel index of
//! `(x, y)` is `x * H + y`.

use ndarray::{Array2, Array3, Axis};
use thiserror::Error;

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

/// Tolerance used when validating that per-pixel distributions sum to one.
pub const SIMPLEX_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("zero-size dimension in shape {shape:?}")]
    ZeroSize { shape: Vec<usize> },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("pixel {pixel} is not a distribution (sum {sum}, min {min})")]
    NotSimplex { pixel: usize, sum: f32, min: f32 },
    #[error("label {value} at pixel {pixel} out of range for {classes} classes")]
    LabelOutOfRange {
        pixel: usize,
        value: u8,
        classes: usize,
    },
    #[error("pixel {pixel} has {active} active channels in a one-hot map")]
    InvalidOneHot { pixel: usize, active: usize },
    #[error("class count {0} unsupported (must be in 1..=254)")]
    ClassCount(usize),
}

fn check_nonzero(shape: &[usize]) -> Result<(), TensorError> {
    if shape.contains(&0) {
        return Err(TensorError::ZeroSize {
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f32>) -> Result<(), TensorError> {
    match values.into_iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Input feature map `[W, H, F]` with a unique identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    id: String,
    data: Array3<f32>,
}

impl Image {
    pub fn new(id: impl Into<String>, data: Array3<f32>) -> Result<Self, TensorError> {
        check_nonzero(data.shape())?;
        check_finite(data.iter())?;
        Ok(Self {
            id: id.into(),
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    /// Contiguous row-major view of the features.
    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn width(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }
}

/// Ground-truth or predicted class per pixel; `IGNORE` marks excluded pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    data: Array2<u8>,
}

impl LabelMap {
    pub fn new(data: Array2<u8>, num_classes: usize) -> Result<Self, TensorError> {
        if num_classes == 0 || num_classes >= IGNORE as usize {
            return Err(TensorError::ClassCount(num_classes));
        }
        check_nonzero(data.shape())?;
        let data = data.as_standard_layout().into_owned();
        for (pixel, &value) in data.iter().enumerate() {
            if value != IGNORE && value as usize >= num_classes {
                return Err(TensorError::LabelOutOfRange {
                    pixel,
                    value,
                    classes: num_classes,
                });
            }
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn as_slice(&self) -> &[u8] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn width(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn get(&self, x: usize, y: usize) -> Option<usize> {
        match self.data[[x, y]] {
            IGNORE => None,
            v => Some(v as usize),
        }
    }

    /// Per-class pixel counts, ignoring `IGNORE`.
    pub fn histogram(&self, num_classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_classes];
        for &v in self.data.iter() {
            if v != IGNORE {
                counts[v as usize] += 1;
            }
        }
        counts
    }
}

/// Per-pixel class distribution `[W, H, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    data: Array3<f32>,
}

impl ProbabilityMap {
    pub fn new(data: Array3<f32>) -> Result<Self, TensorError> {
        check_nonzero(data.shape())?;
        check_finite(data.iter())?;
        let data = data.as_standard_layout().into_owned();
        let classes = data.shape()[2];
        for (pixel, row) in data.as_slice().unwrap().chunks(classes).enumerate() {
            let sum: f32 = row.iter().sum();
            let min = row.iter().copied().fold(f32::INFINITY, f32::min);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE || min < 0.0 || max > 1.0 {
                return Err(TensorError::NotSimplex { pixel, sum, min });
            }
        }
        Ok(Self { data })
    }

    /// Uniform distribution over `classes` at every pixel.
    pub fn uniform(width: usize, height: usize, classes: usize) -> Self {
        Self {
            data: Array3::from_elem((width, height, classes), 1.0 / classes as f32),
        }
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn width(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f32]> {
        self.as_slice().chunks(self.classes())
    }

    /// Hard prediction per pixel (lowest index wins ties).
    pub fn argmax(&self) -> LabelMap {
        let classes: Vec<u8> = self.pixels().map(|p| argmax(p) as u8).collect();
        LabelMap {
            data: Array2::from_shape_vec((self.width(), self.height()), classes)
                .expect("pixel count"),
        }
    }

    /// Highest channel probability per pixel.
    pub fn max_prob(&self) -> Array2<f32> {
        let values: Vec<f32> = self
            .pixels()
            .map(|p| p.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .collect();
        Array2::from_shape_vec((self.width(), self.height()), values).expect("pixel count")
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Binary per-pixel class indicator `[W, H, C]` with at most one active channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotMap {
    data: Array3<u8>,
}

impl OneHotMap {
    pub fn new(data: Array3<u8>) -> Result<Self, TensorError> {
        check_nonzero(data.shape())?;
        let data = data.as_standard_layout().into_owned();
        let classes = data.shape()[2];
        for (pixel, row) in data.as_slice().unwrap().chunks(classes).enumerate() {
            let active = row.iter().filter(|&&v| v != 0).count();
            if active > 1 || row.iter().any(|&v| v > 1) {
                return Err(TensorError::InvalidOneHot { pixel, active });
            }
        }
        Ok(Self { data })
    }

    pub fn empty(width: usize, height: usize, classes: usize) -> Self {
        Self {
            data: Array3::zeros((width, height, classes)),
        }
    }

    /// Builds a map from per-pixel classes in `x * H + y` order.
    pub fn from_classes(
        width: usize,
        height: usize,
        classes: usize,
        per_pixel: impl IntoIterator<Item = Option<usize>>,
    ) -> Self {
        let mut data = Array3::zeros((width, height, classes));
        let flat = data.as_slice_mut().unwrap();
        for (pixel, class) in per_pixel.into_iter().enumerate() {
            if let Some(c) = class {
                flat[pixel * classes + c] = 1;
            }
        }
        Self { data }
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn as_slice(&self) -> &[u8] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn width(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.data.shape()[2]
    }

    /// Active class at each pixel in `x * H + y` order.
    pub fn classes_per_pixel(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        self.as_slice()
            .chunks(self.classes())
            .map(|row| row.iter().position(|&v| v != 0))
    }

    /// Number of pixels with an active channel.
    pub fn count_active(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Per-pixel channel sums.
    pub fn channel_sums(&self) -> Array2<u8> {
        self.data.sum_axis(Axis(2))
    }
}

/// Per-pixel loss weight in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    data: Array2<f32>,
}

impl WeightMap {
    pub fn new(data: Array2<f32>) -> Result<Self, TensorError> {
        check_nonzero(data.shape())?;
        check_finite(data.iter())?;
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            data: Array2::zeros((width, height)),
        }
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f32] {
        self.data.as_slice_mut().expect("standard layout")
    }
}

/// Numerically stable per-pixel softmax over the channel axis.
pub fn softmax_channelwise(logits: &Array3<f32>) -> Result<ProbabilityMap, TensorError> {
    check_nonzero(logits.shape())?;
    check_finite(logits.iter())?;
    Ok(softmax_unchecked(logits))
}

impl ProbabilityMap {
    /// Wraps rows taken verbatim from existing maps.
    pub(crate) fn from_rows_unchecked(data: Array3<f32>) -> Self {
        Self { data }
    }
}

pub(crate) fn softmax_unchecked(logits: &Array3<f32>) -> ProbabilityMap {
    let logits = logits.as_standard_layout();
    let classes = logits.shape()[2];
    let mut out = Array3::<f32>::zeros(logits.raw_dim());
    let src = logits.as_slice().unwrap();
    let dst = out.as_slice_mut().unwrap();
    for (inp, outp) in src.chunks(classes).zip(dst.chunks_mut(classes)) {
        softmax_into(inp, outp);
    }
    ProbabilityMap { data: out }
}

/// Softmax of one pixel's logits into `out`.
pub fn softmax_into(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Hard one-hot encoding of the per-pixel argmax.
pub fn one_hot(p: &ProbabilityMap) -> OneHotMap {
    let classes = p.classes();
    OneHotMap::from_classes(
        p.width(),
        p.height(),
        classes,
        p.pixels().map(|row| Some(argmax(row))),
    )
}
