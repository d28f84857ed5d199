//! Pixel-wise cross-entropy terms.
//!
//! Losses are accumulated in `f64`; gradients are with respect to the
//! student's logits, laid out like the probability map (`[P * C]`).

use serde::{Deserialize, Serialize};

use crate::tensor::{LabelMap, OneHotMap, ProbabilityMap, WeightMap, IGNORE};

/// Denominator of the weighted cross-entropy mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by every pixel; unselected pixels contribute zero.
    #[default]
    AllPixels,
    /// Divide by the number of pixels with an active target.
    SelectedPixels,
}

/// Unnormalized cross-entropy: `loss` and `grad` are sums over pixels and
/// `count` is the denominator that the caller divides by.
#[derive(Debug, Clone)]
pub struct CeSum {
    pub loss: f64,
    pub count: usize,
    pub grad: Vec<f32>,
}

impl CeSum {
    /// Mean loss and gradients scaled to match.
    pub fn normalized(mut self) -> (f64, Vec<f32>) {
        if self.count == 0 {
            self.grad.iter_mut().for_each(|g| *g = 0.0);
            return (0.0, self.grad);
        }
        let inv = 1.0 / self.count as f32;
        self.grad.iter_mut().for_each(|g| *g *= inv);
        (self.loss / self.count as f64, self.grad)
    }
}

fn neg_log(p: f32) -> f64 {
    -(p.max(f32::MIN_POSITIVE) as f64).ln()
}

/// Cross-entropy against hard labels, skipping `IGNORE`.
pub fn supervised_ce_sum(prob: &ProbabilityMap, labels: &LabelMap) -> CeSum {
    let c = prob.classes();
    let mut grad = prob.as_slice().to_vec();
    let mut loss = 0.0;
    let mut count = 0;
    for (pixel, &label) in labels.as_slice().iter().enumerate() {
        let g = &mut grad[pixel * c..(pixel + 1) * c];
        if label == IGNORE {
            g.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let t = label as usize;
        loss += neg_log(prob.as_slice()[pixel * c + t]);
        g[t] -= 1.0;
        count += 1;
    }
    CeSum { loss, count, grad }
}

/// Mean cross-entropy over non-ignored pixels of one map.
pub fn supervised_ce_loss(prob: &ProbabilityMap, labels: &LabelMap) -> (f64, Vec<f32>) {
    supervised_ce_sum(prob, labels).normalized()
}

/// Confidence-weighted cross-entropy against a (possibly partial) one-hot
/// target. Pixels with no active target contribute nothing.
pub fn weighted_ce_sum(prob: &ProbabilityMap, target: &OneHotMap, weights: &WeightMap, norm: Normalization) -> CeSum {
    let c = prob.classes();
    let p = prob.as_slice();
    let mut grad = vec![0.0f32; p.len()];
    let mut loss = 0.0;
    let mut selected = 0;
    for (pixel, (class, &w)) in target.classes_per_pixel().zip(weights.as_slice()).enumerate() {
        let Some(t) = class else { continue };
        selected += 1;
        if w == 0.0 {
            continue;
        }
        loss += w as f64 * neg_log(p[pixel * c + t]);
        let g = &mut grad[pixel * c..(pixel + 1) * c];
        for (j, gv) in g.iter_mut().enumerate() {
            *gv = w * (p[pixel * c + j] - if j == t { 1.0 } else { 0.0 });
        }
    }
    let count = match norm {
        Normalization::AllPixels => target.width() * target.height(),
        Normalization::SelectedPixels => selected,
    };
    CeSum { loss, count, grad }
}

/// Mean weighted cross-entropy of one map with its logit gradient.
pub fn weighted_ce_loss(prob: &ProbabilityMap, target: &OneHotMap, weights: &WeightMap, norm: Normalization) -> (f64, Vec<f32>) {
    weighted_ce_sum(prob, target, weights, norm).normalized()
}

/// Sums per-image terms and normalizes by the pooled denominator, so every
/// pixel of the batch carries equal weight.
pub fn pool(terms: Vec<CeSum>) -> (f64, Vec<Vec<f32>>) {
    let count: usize = terms.iter().map(|t| t.count).sum();
    let loss: f64 = terms.iter().map(|t| t.loss).sum();
    let scale = if count == 0 { 0.0 } else { 1.0 / count as f32 };
    let grads = terms
        .into_iter()
        .map(|t| t.grad.into_iter().map(|g| g * scale).collect())
        .collect();
    (if count == 0 { 0.0 } else { loss / count as f64 }, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn prob(values: &[f32], c: usize) -> ProbabilityMap {
        let n = values.len() / c;
        ProbabilityMap::new(Array3::from_shape_vec((n, 1, c), values.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn half_probability_gives_ln2() {
        let p = prob(&[0.5, 0.5], 2);
        let t = OneHotMap::from_classes(1, 1, 2, [Some(0)]);
        let w = WeightMap::new(Array2::from_elem((1, 1), 1.0)).unwrap();
        let (loss, grad) = weighted_ce_loss(&p, &t, &w, Normalization::AllPixels);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(grad, vec![-0.5, 0.5]);
    }

    #[test]
    fn perfect_student_has_zero_loss() {
        let p = prob(&[1.0, 0.0, 0.0, 1.0], 2);
        let t = OneHotMap::from_classes(2, 1, 2, [Some(0), Some(1)]);
        let w = WeightMap::new(Array2::from_elem((2, 1), 0.8)).unwrap();
        let (loss, grad) = weighted_ce_loss(&p, &t, &w, Normalization::SelectedPixels);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_weights_zero_loss() {
        let p = prob(&[0.2, 0.8, 0.6, 0.4], 2);
        let t = OneHotMap::from_classes(2, 1, 2, [Some(0), Some(0)]);
        let w = WeightMap::zeros(2, 1);
        for norm in [Normalization::AllPixels, Normalization::SelectedPixels] {
            let (loss, grad) = weighted_ce_loss(&p, &t, &w, norm);
            assert_eq!(loss, 0.0);
            assert!(grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn empty_selection_is_zero() {
        let p = prob(&[0.2, 0.8], 2);
        let t = OneHotMap::empty(1, 1, 2);
        let w = WeightMap::zeros(1, 1);
        let (loss, grad) = weighted_ce_loss(&p, &t, &w, Normalization::SelectedPixels);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn normalizations_differ_by_selected_fraction() {
        let p = prob(&[0.5, 0.5, 0.25, 0.75], 2);
        let t = OneHotMap::from_classes(2, 1, 2, [Some(0), None]);
        let w = WeightMap::new(Array2::from_shape_vec((2, 1), vec![1.0, 0.0]).unwrap()).unwrap();
        let (all, _) = weighted_ce_loss(&p, &t, &w, Normalization::AllPixels);
        let (sel, _) = weighted_ce_loss(&p, &t, &w, Normalization::SelectedPixels);
        assert!((sel - 2f64.ln()).abs() < 1e-12);
        assert!((all - 2f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn supervised_skips_ignore() {
        let p = prob(&[0.5, 0.5, 0.9, 0.1], 2);
        let l = LabelMap::new(Array2::from_shape_vec((2, 1), vec![1, IGNORE]).unwrap(), 2).unwrap();
        let (loss, grad) = supervised_ce_loss(&p, &l);
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(&grad[2..], &[0.0, 0.0]);
    }

    #[test]
    fn pooling_weights_pixels_equally() {
        let a = CeSum { loss: 2.0, count: 1, grad: vec![1.0] };
        let b = CeSum { loss: 4.0, count: 3, grad: vec![3.0] };
        let (loss, grads) = pool(vec![a, b]);
        assert_eq!(loss, 1.5);
        assert_eq!(grads, vec![vec![0.25], vec![0.75]]);
    }
}
