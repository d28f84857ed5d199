//! Weak (flip + crop-with-pad) and strong (weak + CutMix + jitter) views.
//!
//! Every random choice is captured in an [`AugRecord`] so the same geometry
//! can be replayed on label maps and teacher predictions.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Image, LabelMap, ProbabilityMap, TensorError, IGNORE};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("no {ratio_lo}-{ratio_hi} area rectangle fits a {width}x{height} image after {tries} tries")]
    RectangleDoesNotFit {
        width: usize,
        height: usize,
        ratio_lo: f64,
        ratio_hi: f64,
        tries: usize,
    },
    #[error("image and mix source differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One pasted CutMix region in output coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub source_id: String,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn area_ratio(&self, width: usize, height: usize) -> f64 {
        (self.w * self.h) as f64 / (width * height) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugRecord {
    pub flip: bool,
    /// Output pixel `(x, y)` reads the (possibly flipped) input at
    /// `(x + dx, y + dy)`; reads outside the input hit padding.
    pub crop_offset: (i64, i64),
    pub rects: Vec<Rect>,
}

impl AugRecord {
    pub fn identity() -> Self {
        Self {
            flip: false,
            crop_offset: (0, 0),
            rects: Vec::new(),
        }
    }

    /// Input coordinate feeding output `(x, y)`, or `None` for padding.
    pub fn source_coord(&self, x: usize, y: usize, width: usize, height: usize) -> Option<(usize, usize)> {
        let sx = x as i64 + self.crop_offset.0;
        let sy = y as i64 + self.crop_offset.1;
        if sx < 0 || sy < 0 || sx >= width as i64 || sy >= height as i64 {
            return None;
        }
        let sx = if self.flip { width as i64 - 1 - sx } else { sx };
        Some((sx as usize, sy as usize))
    }

    /// Applies flip and crop to a `[W, H, K]` grid, filling padding with `fill`.
    pub fn warp<T: Copy>(&self, grid: &Array3<T>, fill: T) -> Array3<T> {
        let (w, h, k) = grid.dim();
        let mut out = Array3::from_elem((w, h, k), fill);
        for x in 0..w {
            for y in 0..h {
                if let Some((sx, sy)) = self.source_coord(x, y, w, h) {
                    for c in 0..k {
                        out[[x, y, c]] = grid[[sx, sy, c]];
                    }
                }
            }
        }
        out
    }

    /// Mask of output pixels that map inside the input.
    pub fn valid_mask(&self, width: usize, height: usize) -> Array2<bool> {
        Array2::from_shape_fn((width, height), |(x, y)| self.source_coord(x, y, width, height).is_some())
    }

    /// Pastes the recorded rectangles from `source` over `base` (both already warped).
    pub fn paste<T: Copy>(&self, base: &Array3<T>, source: &Array3<T>) -> Array3<T> {
        let mut out = base.clone();
        for r in &self.rects {
            for x in r.x..r.x + r.w {
                for y in r.y..r.y + r.h {
                    for c in 0..out.dim().2 {
                        out[[x, y, c]] = source[[x, y, c]];
                    }
                }
            }
        }
        out
    }

    /// Output pixels whose content came from the mix source.
    pub fn mixed_mask(&self, width: usize, height: usize) -> Array2<bool> {
        Array2::from_shape_fn((width, height), |(x, y)| self.rects.iter().any(|r| r.contains(x, y)))
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        Image::new(img.id(), self.warp(img.data(), 0.0)).expect("warp keeps values finite")
    }

    pub fn apply_labels(&self, labels: &LabelMap, num_classes: usize) -> LabelMap {
        let grid = labels.data().clone().insert_axis(ndarray::Axis(2));
        let warped = self.warp(&grid, IGNORE).remove_axis(ndarray::Axis(2));
        LabelMap::new(warped, num_classes).expect("warp keeps labels in range")
    }

    /// Replays flip, crop and pastes on a pair of label maps.
    pub fn mix_labels(&self, base: &LabelMap, source: &LabelMap, num_classes: usize) -> LabelMap {
        let b = self.warp(&base.data().clone().insert_axis(ndarray::Axis(2)), IGNORE);
        let s = self.warp(&source.data().clone().insert_axis(ndarray::Axis(2)), IGNORE);
        let mixed = self.paste(&b, &s).remove_axis(ndarray::Axis(2));
        LabelMap::new(mixed, num_classes).expect("labels stay in range")
    }

    /// Composes CutMix targets from predictions on the two weak views.
    /// Inputs are already in output geometry. Rows are copied, not checked,
    /// so non-finite predictions pass through to the step's finiteness test.
    pub fn mix_probabilities(&self, base: &ProbabilityMap, source: &ProbabilityMap) -> ProbabilityMap {
        ProbabilityMap::from_rows_unchecked(self.paste(base.data(), source.data()))
    }
}

fn default_pad() -> usize {
    4
}

/// Augmentation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Maximum crop offset in pixels (zero padding beyond the border).
    pub pad: usize,
    pub flip_prob: f64,
    pub num_rects: usize,
    pub area_ratio: (f64, f64),
    pub aspect_ratio: (f64, f64),
    /// Jitter std as a fraction of the image's RMS feature magnitude.
    pub jitter: f64,
    pub max_tries: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pad: default_pad(),
            flip_prob: 0.5,
            num_rects: 3,
            area_ratio: (0.25, 0.5),
            aspect_ratio: (0.5, 2.0),
            jitter: 0.05,
            max_tries: 100,
        }
    }
}

impl AugmentConfig {
    pub fn weak_record(&self, rng: &mut Rng) -> AugRecord {
        let flip = rng.bernoulli(self.flip_prob);
        let p = self.pad as i64;
        let dx = rng.between(-p, p);
        let dy = rng.between(-p, p);
        AugRecord {
            flip,
            crop_offset: (dx, dy),
            rects: Vec::new(),
        }
    }

    /// Weak view: horizontal flip and random crop-with-pad at the input size.
    pub fn weak_augment(&self, img: &Image, rng: &mut Rng) -> (Image, AugRecord) {
        let record = self.weak_record(rng);
        (record.apply_image(img), record)
    }

    /// One rectangle with integer area ratio inside `area_ratio`.
    pub fn sample_rect(&self, width: usize, height: usize, source_id: &str, rng: &mut Rng) -> Result<Rect, AugmentError> {
        let area = (width * height) as f64;
        let (lo, hi) = self.area_ratio;
        for _ in 0..self.max_tries {
            let ratio = rng.uniform_range(lo, hi);
            let aspect = rng
                .uniform_range(self.aspect_ratio.0.ln(), self.aspect_ratio.1.ln())
                .exp();
            let w = (ratio * area * aspect).sqrt().round() as usize;
            let h = (ratio * area / aspect).sqrt().round() as usize;
            if w == 0 || h == 0 || w > width || h > height {
                continue;
            }
            let actual = (w * h) as f64 / area;
            if actual < lo || actual > hi {
                continue;
            }
            let x = rng.below(width - w + 1);
            let y = rng.below(height - h + 1);
            return Ok(Rect {
                source_id: source_id.to_string(),
                x,
                y,
                w,
                h,
            });
        }
        Err(AugmentError::RectangleDoesNotFit {
            width,
            height,
            ratio_lo: lo,
            ratio_hi: hi,
            tries: self.max_tries,
        })
    }

    /// Strong view: the weak geometry is applied to both `img` and
    /// `mix_source`, `num_rects` rectangles of the warped source are pasted,
    /// then Gaussian jitter is added.
    pub fn strong_augment(&self, img: &Image, mix_source: &Image, rng: &mut Rng) -> Result<(Image, AugRecord), AugmentError> {
        if img.data().shape() != mix_source.data().shape() {
            return Err(AugmentError::ShapeMismatch(
                img.data().shape().to_vec(),
                mix_source.data().shape().to_vec(),
            ));
        }
        let mut record = self.weak_record(rng);
        let (w, h) = (img.width(), img.height());
        for _ in 0..self.num_rects {
            record.rects.push(self.sample_rect(w, h, mix_source.id(), rng)?);
        }
        let base = record.warp(img.data(), 0.0);
        let source = record.warp(mix_source.data(), 0.0);
        let mut mixed = record.paste(&base, &source);
        if self.jitter > 0.0 {
            let rms = (img.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / img.data().len() as f64).sqrt();
            let std = self.jitter * rms;
            mixed.iter_mut().for_each(|v| *v += (std * rng.normal()) as f32);
        }
        Ok((Image::new(img.id(), mixed)?, record))
    }
}
