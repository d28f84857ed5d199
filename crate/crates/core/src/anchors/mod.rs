//! Fixed class anchors on the unit sphere, EMA class prototypes, the
//! prototype-to-anchor assignment, a per-class feature memory bank and the
//! two contrastive losses built on them.

mod bank;
pub mod hungarian;
mod losses;

pub use bank::{match_prototypes, Assignment, MemoryBank, PrototypeBank};
pub use losses::{anchor_contrastive_loss, contrastive_batch_loss, similarity_loss, ContrastiveLoss};

use log::warn;
use ndarray::Array2;
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnchorError {
    #[error("need at least 2 classes and 2 dimensions, got C={classes}, D={dim}")]
    TooSmall { classes: usize, dim: usize },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f32),
    #[error("anchor {row} has norm {norm}, expected 1")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("prototype for class {0} has not been observed yet")]
    UninitializedPrototype(usize),
    #[error("not a permutation: {0:?}")]
    NotPermutation(Vec<usize>),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
}

/// `C` unit-norm anchors in `D` dimensions plus the temperature used with them.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    v: Array2<f32>,
    tau: f32,
}

impl AnchorSet {
    pub fn new(v: Array2<f32>, tau: f32) -> Result<Self, AnchorError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(AnchorError::BadTemperature(tau));
        }
        for (row, r) in v.rows().into_iter().enumerate() {
            let norm = r.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(AnchorError::NotUnitNorm { row, norm });
            }
        }
        Ok(Self { v, tau })
    }

    pub fn vectors(&self) -> &Array2<f32> {
        &self.v
    }

    pub fn tau(&self) -> f32 {
        self.tau
    }

    pub fn classes(&self) -> usize {
        self.v.nrows()
    }

    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.v.as_slice().expect("standard layout")[i * d..(i + 1) * d]
    }

    /// Cosine between anchors `i` and `j`.
    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        self.row(i).iter().zip(self.row(j)).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    pub fn max_pairwise_cosine(&self) -> f64 {
        let c = self.classes();
        (0..c)
            .flat_map(|i| (i + 1..c).map(move |j| (i, j)))
            .map(|(i, j)| self.cosine(i, j))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn uniformity_loss(&self) -> f64 {
        anchor_uniformity_loss(&self.v.mapv(|x| x as f64), self.tau as f64)
    }
}

/// `(1/C) * sum_i log sum_j exp(v_i . v_j / tau)` over the rows of `v`.
pub fn anchor_uniformity_loss(v: &Array2<f64>, tau: f64) -> f64 {
    let gram = v.dot(&v.t()) / tau;
    let c = v.nrows();
    gram.rows().into_iter().map(|r| logsumexp(r.iter().copied())).sum::<f64>() / c as f64
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn uniformity_loss_and_grad(v: &Array2<f64>, tau: f64) -> (f64, Array2<f64>) {
    let c = v.nrows();
    let mut s = v.dot(&v.t()) / tau;
    let mut loss = 0.0;
    for mut r in s.rows_mut() {
        let lse = logsumexp(r.iter().copied());
        loss += lse;
        r.mapv_inplace(|x| (x - lse).exp());
    }
    // d/dv_i = (1 / (C tau)) * sum_j (s_ij + s_ji) v_j
    let sym = &s + &s.t();
    let grad = sym.dot(v) / (c as f64 * tau);
    (loss / c as f64, grad)
}

fn normalize_rows(v: &mut Array2<f64>) {
    for mut r in v.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_steps: usize,
    /// Stop once the loss improves by less than `tolerance` over `window` steps.
    pub tolerance: f64,
    pub window: usize,
    pub initial_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_steps: 50_000,
            tolerance: 1e-9,
            window: 100,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnchorFit {
    pub anchors: AnchorSet,
    pub loss: f64,
    pub steps: usize,
    /// False when the step budget ran out first; `anchors` is then the best
    /// iterate seen.
    pub converged: bool,
    /// Loss after every accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

/// Spreads `classes` anchors over the unit sphere in `dim` dimensions by
/// projected gradient descent with backtracking.
pub fn fit_anchors(classes: usize, dim: usize, tau: f32, rng: &mut Rng) -> Result<AnchorFit, AnchorError> {
    fit_anchors_with(classes, dim, tau, rng, FitOptions::default())
}

pub fn fit_anchors_with(
    classes: usize,
    dim: usize,
    tau: f32,
    rng: &mut Rng,
    opts: FitOptions,
) -> Result<AnchorFit, AnchorError> {
    if classes < 2 || dim < 2 {
        return Err(AnchorError::TooSmall { classes, dim });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(AnchorError::BadTemperature(tau));
    }
    let t = tau as f64;
    let mut v = Array2::from_shape_fn((classes, dim), |_| rng.normal());
    normalize_rows(&mut v);
    let (mut loss, mut grad) = uniformity_loss_and_grad(&v, t);
    let mut history = vec![loss];
    let mut step = opts.initial_step;
    let mut converged = false;
    let mut steps = 0;
    while steps < opts.max_steps {
        steps += 1;
        let mut accepted = false;
        while step > 1e-14 {
            let mut cand = &v - &(&grad * step);
            normalize_rows(&mut cand);
            let (cl, cg) = uniformity_loss_and_grad(&cand, t);
            if cl <= loss {
                v = cand;
                loss = cl;
                grad = cg;
                accepted = true;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no descent direction left at machine precision
            converged = true;
            break;
        }
        history.push(loss);
        if history.len() > opts.window {
            let before = history[history.len() - 1 - opts.window];
            if before - loss < opts.tolerance {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        warn!("anchor fitting stopped after {steps} steps without converging (loss {loss})");
    }
    let mut out = v.mapv(|x| x as f32);
    for mut r in out.rows_mut() {
        let n = r.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() as f32;
        r /= n;
    }
    Ok(AnchorFit {
        anchors: AnchorSet::new(out, tau)?,
        loss,
        steps,
        converged,
        history,
    })
}
