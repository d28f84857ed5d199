//! Anchor contrastive and memory-bank similarity losses. Both normalize the
//! raw feature internally and return the gradient with respect to the raw
//! (unnormalized) feature.

use super::bank::{Assignment, MemoryBank};
use super::AnchorSet;

struct Normalized {
    u: Vec<f64>,
    norm: f64,
}

fn normalize(f: &[f32]) -> Option<Normalized> {
    let norm = f.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    Some(Normalized {
        u: f.iter().map(|x| *x as f64 / norm).collect(),
        norm,
    })
}

/// Chain rule through `u = f / |f|`: `(I - u u^T) g / |f|`.
fn through_normalization(n: &Normalized, du: &[f64]) -> Vec<f32> {
    let dot: f64 = n.u.iter().zip(du).map(|(a, b)| a * b).sum();
    n.u.iter().zip(du).map(|(u, g)| ((g - dot * u) / n.norm) as f32).collect()
}

/// `-log softmax` of the feature's cosine to its class's anchor against all
/// anchors, at the anchor set's temperature. Anchors are constants.
pub fn anchor_contrastive_loss(f: &[f32], class: usize, anchors: &AnchorSet, sigma: &Assignment) -> (f64, Vec<f32>) {
    let c = anchors.classes();
    let tau = anchors.tau() as f64;
    let Some(n) = normalize(f) else {
        return ((c as f64).ln(), vec![0.0; f.len()]);
    };
    let logits: Vec<f64> = (0..c)
        .map(|j| anchors.row(j).iter().zip(&n.u).map(|(v, u)| *v as f64 * u).sum::<f64>() / tau)
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let pos = sigma.anchor_of(class);
    let loss = m + z.ln() - logits[pos];
    let mut du = vec![0.0f64; f.len()];
    for (j, l) in logits.iter().enumerate() {
        let w = (l - m).exp() / z - if j == pos { 1.0 } else { 0.0 };
        for (d, v) in du.iter_mut().zip(anchors.row(j)) {
            *d += w * *v as f64 / tau;
        }
    }
    (loss, through_normalization(&n, &du))
}

/// Mean `1 - cos` between the feature and every stored feature of its
/// class; zero when the queue is empty.
pub fn similarity_loss(f: &[f32], class: usize, bank: &MemoryBank) -> (f64, Vec<f32>) {
    similarity_from_mean(f, bank.mean_feature(class).as_deref())
}

/// Stored features are unit-norm, so the mean cosine equals the cosine
/// against their (unnormalized) mean.
fn similarity_from_mean(f: &[f32], mean: Option<&[f64]>) -> (f64, Vec<f32>) {
    let (Some(mean), Some(n)) = (mean, normalize(f)) else {
        return (0.0, vec![0.0; f.len()]);
    };
    let cos: f64 = mean.iter().zip(&n.u).map(|(a, b)| a * b).sum();
    let du: Vec<f64> = mean.iter().map(|m| -m).collect();
    (1.0 - cos, through_normalization(&n, &du))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    /// Mean anchor contrastive term.
    pub anchor: f64,
    /// Mean similarity term.
    pub similarity: f64,
    /// Gradient of `anchor + similarity` w.r.t. each raw feature, `[n, D]`.
    pub grad: Vec<f32>,
}

impl ContrastiveLoss {
    pub fn total(&self) -> f64 {
        self.anchor + self.similarity
    }
}

/// Averages both terms over `n` sampled features (`features` is `[n, D]`).
pub fn contrastive_batch_loss(
    features: &[f32],
    classes: &[usize],
    anchors: &AnchorSet,
    sigma: &Assignment,
    bank: &MemoryBank,
) -> ContrastiveLoss {
    let n = classes.len();
    let d = anchors.dim();
    assert_eq!(features.len(), n * d, "feature rows");
    let mut out = ContrastiveLoss { anchor: 0.0, similarity: 0.0, grad: vec![0.0; n * d] };
    if n == 0 {
        return out;
    }
    let inv = 1.0 / n as f64;
    let means: Vec<Option<Vec<f64>>> = (0..bank.classes()).map(|c| bank.mean_feature(c)).collect();
    for (i, &class) in classes.iter().enumerate() {
        let f = &features[i * d..(i + 1) * d];
        let (la, ga) = anchor_contrastive_loss(f, class, anchors, sigma);
        let (ls, gs) = similarity_from_mean(f, means[class].as_deref());
        out.anchor += la * inv;
        out.similarity += ls * inv;
        for ((g, a), s) in out.grad[i * d..(i + 1) * d].iter_mut().zip(&ga).zip(&gs) {
            *g = ((*a as f64 + *s as f64) * inv) as f32;
        }
    }
    out
}
