//! Minimal per-pixel segmentation network with hand-written backprop.
//!
//! Architecture: 3x3 conv (zero padding) -> ReLU, feeding a 1x1
//! segmentation head (logits) and a 1x1 -> ReLU -> [dropout] -> 1x1
//! projection head (contrastive features).

mod optim;

pub use optim::{ema_update, poly_lr, LrSchedule, Sgd, StepOutcome};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{softmax_unchecked, Image, ProbabilityMap, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub in_channels: usize,
    pub hidden: usize,
    pub classes: usize,
    pub feature_dim: usize,
}

/// Parameter names in serialization order.
pub const PARAM_NAMES: [&str; 8] = [
    "conv_w", "conv_b", "seg_w", "seg_b", "proj1_w", "proj1_b", "proj2_w", "proj2_b",
];

/// Weights of one model. Layouts: `conv_w[(k * F + f) * Hd + h]` with
/// kernel offset `k = (dx + 1) * 3 + (dy + 1)`; dense weights are
/// `[in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub conv_w: Vec<f32>,
    pub conv_b: Vec<f32>,
    pub seg_w: Vec<f32>,
    pub seg_b: Vec<f32>,
    pub proj1_w: Vec<f32>,
    pub proj1_b: Vec<f32>,
    pub proj2_w: Vec<f32>,
    pub proj2_b: Vec<f32>,
}

impl ModelShape {
    /// Tensor shapes in [`PARAM_NAMES`] order.
    pub fn tensor_shapes(&self) -> [Vec<usize>; 8] {
        let (f, hd, c, d) = (self.in_channels, self.hidden, self.classes, self.feature_dim);
        [
            vec![9, f, hd],
            vec![hd],
            vec![hd, c],
            vec![c],
            vec![hd, hd],
            vec![hd],
            vec![hd, d],
            vec![d],
        ]
    }
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        let (f, hd, c, d) = (shape.in_channels, shape.hidden, shape.classes, shape.feature_dim);
        Self {
            shape,
            conv_w: vec![0.0; 9 * f * hd],
            conv_b: vec![0.0; hd],
            seg_w: vec![0.0; hd * c],
            seg_b: vec![0.0; c],
            proj1_w: vec![0.0; hd * hd],
            proj1_b: vec![0.0; hd],
            proj2_w: vec![0.0; hd * d],
            proj2_b: vec![0.0; d],
        }
    }

    /// He-style uniform fan-in initialization; biases start at zero.
    pub fn init(shape: ModelShape, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(shape);
        let mut fill = |w: &mut Vec<f32>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.uniform_range(-bound, bound) as f32);
        };
        fill(&mut p.conv_w, 9 * shape.in_channels);
        fill(&mut p.seg_w, shape.hidden);
        fill(&mut p.proj1_w, shape.hidden);
        fill(&mut p.proj2_w, shape.hidden);
        p
    }

    pub fn tensors(&self) -> [&Vec<f32>; 8] {
        [
            &self.conv_w,
            &self.conv_b,
            &self.seg_w,
            &self.seg_b,
            &self.proj1_w,
            &self.proj1_b,
            &self.proj2_w,
            &self.proj2_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f32>; 8] {
        [
            &mut self.conv_w,
            &mut self.conv_b,
            &mut self.seg_w,
            &mut self.seg_b,
            &mut self.proj1_w,
            &mut self.proj1_b,
            &mut self.proj2_w,
            &mut self.proj2_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in [`PARAM_NAMES`] order.
    pub fn flatten(&self) -> Vec<f32> {
        self.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn from_flat(shape: ModelShape, flat: &[f32]) -> Result<Self, TensorError> {
        let mut p = Self::zeros(shape);
        if flat.len() != p.num_params() {
            return Err(TensorError::ShapeMismatch {
                expected: vec![p.num_params()],
                found: vec![flat.len()],
            });
        }
        let mut at = 0;
        for t in p.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(p)
    }

    pub fn set_flat(&mut self, index: usize, value: f32) {
        let mut i = index;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f32) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Euclidean distance between two parameter sets.
    pub fn distance(&self, other: &ModelParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Intermediates retained for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    width: usize,
    height: usize,
    /// 3x3 neighbourhoods `[P, 9 * F]`, zero outside the image.
    cols: Array2<f32>,
    /// Post-ReLU trunk activations `[P, Hd]`.
    hidden: Array2<f32>,
    /// Post-ReLU projection activations `[P, Hd]` (before dropout).
    proj_hidden: Option<Array2<f32>>,
    /// Inverted-dropout multipliers on `proj_hidden`.
    dropout: Option<Array2<f32>>,
}

impl ForwardCache {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// `[W, H, C]`
    pub logits: Array3<f32>,
    /// Raw projection-head output `[W, H, D]` (not normalized).
    pub features: Option<Array3<f32>>,
    pub cache: ForwardCache,
}

impl Forward {
    pub fn probabilities(&self) -> ProbabilityMap {
        softmax_unchecked(&self.logits)
    }
}

/// Inverted dropout applied inside the projection head.
pub struct Dropout<'a> {
    pub p: f32,
    pub rng: &'a mut Rng,
}

fn check_input(params: &ModelParams, img: &Image) -> Result<(), TensorError> {
    if img.channels() != params.shape.in_channels {
        return Err(TensorError::ShapeMismatch {
            expected: vec![img.width(), img.height(), params.shape.in_channels],
            found: img.data().shape().to_vec(),
        });
    }
    Ok(())
}

fn weights<'a>(w: &'a [f32], rows: usize, cols: usize) -> ArrayView2<'a, f32> {
    ArrayView2::from_shape((rows, cols), w).expect("weight shape")
}

fn weights_mut<'a>(w: &'a mut [f32], rows: usize, cols: usize) -> ArrayViewMut2<'a, f32> {
    ArrayViewMut2::from_shape((rows, cols), w).expect("weight shape")
}

/// `input . w + b` for row-major `w` of shape `[in, out]`.
fn dense(input: &Array2<f32>, w: &[f32], b: &[f32]) -> Array2<f32> {
    let out_dim = b.len();
    let mut out = ArrayView1::from(b)
        .broadcast((input.nrows(), out_dim))
        .expect("bias broadcast")
        .to_owned();
    general_mat_mul(1.0, input, &weights(w, input.ncols(), out_dim), 1.0, &mut out);
    out
}

fn im2col(img: &Image) -> Array2<f32> {
    let (w, h, f) = (img.width(), img.height(), img.channels());
    let x = img.as_slice();
    let mut cols = Array2::<f32>::zeros((w * h, 9 * f));
    for px in 0..w {
        for py in 0..h {
            let mut row = cols.row_mut(px * h + py);
            let row = row.as_slice_mut().expect("row-major");
            for (k, (dx, dy)) in KERNEL_OFFSETS.iter().enumerate() {
                let (qx, qy) = (px as i64 + dx, py as i64 + dy);
                if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                    continue;
                }
                let q = qx as usize * h + qy as usize;
                row[k * f..(k + 1) * f].copy_from_slice(&x[q * f..(q + 1) * f]);
            }
        }
    }
    cols
}

/// Runs the trunk and segmentation head; the projection head only when
/// `with_features` is set.
pub fn forward(params: &ModelParams, img: &Image, with_features: bool) -> Result<Forward, TensorError> {
    forward_impl(params, img, with_features, None)
}

/// Like [`forward`] with inverted dropout in the projection head.
pub fn forward_with_dropout(params: &ModelParams, img: &Image, dropout: Dropout<'_>) -> Result<Forward, TensorError> {
    forward_impl(params, img, true, Some(dropout))
}

fn forward_impl(
    params: &ModelParams,
    img: &Image,
    with_features: bool,
    dropout: Option<Dropout<'_>>,
) -> Result<Forward, TensorError> {
    check_input(params, img)?;
    let s = params.shape;
    let (w, h) = (img.width(), img.height());

    let cols = im2col(img);
    let mut hidden = dense(&cols, &params.conv_w, &params.conv_b);
    hidden.mapv_inplace(|v| v.max(0.0));
    let logits = dense(&hidden, &params.seg_w, &params.seg_b);

    let (mut features, mut proj_hidden, mut mask) = (None, None, None);
    if with_features {
        let mut a3 = dense(&hidden, &params.proj1_w, &params.proj1_b);
        a3.mapv_inplace(|v| v.max(0.0));
        let feat = match dropout {
            Some(Dropout { p, rng }) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let m = a3.map(|_| if rng.bernoulli(p as f64) { 0.0 } else { keep });
                let feat = dense(&(&a3 * &m), &params.proj2_w, &params.proj2_b);
                mask = Some(m);
                feat
            }
            _ => dense(&a3, &params.proj2_w, &params.proj2_b),
        };
        features = Some(feat.into_shape_with_order((w, h, s.feature_dim)).expect("feature shape"));
        proj_hidden = Some(a3);
    }

    Ok(Forward {
        logits: logits.into_shape_with_order((w, h, s.classes)).expect("logit shape"),
        features,
        cache: ForwardCache {
            width: w,
            height: h,
            cols,
            hidden,
            proj_hidden,
            dropout: mask,
        },
    })
}

const KERNEL_OFFSETS: [(i64, i64); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn add_column_sums(bias: &mut [f32], g: &Array2<f32>) {
    for row in g.rows() {
        bias.iter_mut().zip(row.iter()).for_each(|(b, &v)| *b += v);
    }
}

/// Accumulates parameter gradients into `grads` given the loss gradients
/// with respect to the logits `[P * C]` and, optionally, the raw features
/// `[P * D]`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits: &[f32],
    dfeatures: Option<&[f32]>,
    grads: &mut ModelParams,
) {
    let s = params.shape;
    let n = cache.pixels();
    let (f, hd, c, d) = (s.in_channels, s.hidden, s.classes, s.feature_dim);
    assert_eq!(dlogits.len(), n * c, "logit gradient shape");

    let dl = ArrayView2::from_shape((n, c), dlogits).expect("logit gradient shape");
    let dl = dl.to_owned();
    add_column_sums(&mut grads.seg_b, &dl);
    general_mat_mul(1.0, &cache.hidden.t(), &dl, 1.0, &mut weights_mut(&mut grads.seg_w, hd, c));
    let mut dhidden = dl.dot(&weights(&params.seg_w, hd, c).t());

    if let Some(df) = dfeatures {
        assert_eq!(df.len(), n * d, "feature gradient shape");
        let a3 = cache.proj_hidden.as_ref().expect("forward ran without features");
        // only sampled pixels carry feature gradients
        let rows: Vec<usize> = (0..n).filter(|&p| df[p * d..(p + 1) * d].iter().any(|&v| v != 0.0)).collect();
        if !rows.is_empty() {
            let m = rows.len();
            let g = Array2::from_shape_fn((m, d), |(r, j)| df[rows[r] * d + j]);
            let mult = |r: usize, i: usize| cache.dropout.as_ref().map_or(1.0, |mk| mk[[rows[r], i]]);
            let act = Array2::from_shape_fn((m, hd), |(r, i)| a3[[rows[r], i]]);
            let a_in = Array2::from_shape_fn((m, hd), |(r, i)| act[[r, i]] * mult(r, i));
            add_column_sums(&mut grads.proj2_b, &g);
            general_mat_mul(1.0, &a_in.t(), &g, 1.0, &mut weights_mut(&mut grads.proj2_w, hd, d));
            let mut da3 = g.dot(&weights(&params.proj2_w, hd, d).t());
            // ReLU gate on the projection hidden unit
            for r in 0..m {
                for i in 0..hd {
                    da3[[r, i]] = if act[[r, i]] > 0.0 { da3[[r, i]] * mult(r, i) } else { 0.0 };
                }
            }
            let a1 = Array2::from_shape_fn((m, hd), |(r, i)| cache.hidden[[rows[r], i]]);
            add_column_sums(&mut grads.proj1_b, &da3);
            general_mat_mul(1.0, &a1.t(), &da3, 1.0, &mut weights_mut(&mut grads.proj1_w, hd, hd));
            let dh = da3.dot(&weights(&params.proj1_w, hd, hd).t());
            for (r, &p) in rows.iter().enumerate() {
                dhidden.row_mut(p).zip_mut_with(&dh.row(r), |a, &b| *a += b);
            }
        }
    }

    // trunk ReLU gate
    dhidden.zip_mut_with(&cache.hidden, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    add_column_sums(&mut grads.conv_b, &dhidden);
    general_mat_mul(1.0, &cache.cols.t(), &dhidden, 1.0, &mut weights_mut(&mut grads.conv_w, 9 * f, hd));
}

/// Class probabilities for `img` (no projection head).
pub fn predict(params: &ModelParams, img: &Image) -> Result<ProbabilityMap, TensorError> {
    Ok(forward(params, img, false)?.probabilities())
}
