use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::hungarian::solve_lexicographic;
use super::{AnchorError, AnchorSet};

pub(crate) fn unit(f: &[f32]) -> Vec<f32> {
    let n = f.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if n == 0.0 {
        return f.to_vec();
    }
    f.iter().map(|x| (*x as f64 / n) as f32).collect()
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Class prototypes tracked by an exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub alpha: f32,
    c: Array2<f32>,
    initialized: Vec<bool>,
}

impl PrototypeBank {
    pub fn new(classes: usize, dim: usize, alpha: f32) -> Self {
        Self {
            alpha,
            c: Array2::zeros((classes, dim)),
            initialized: vec![false; classes],
        }
    }

    pub fn from_parts(c: Array2<f32>, initialized: Vec<bool>, alpha: f32) -> Result<Self, AnchorError> {
        if initialized.len() != c.nrows() {
            return Err(AnchorError::ShapeMismatch {
                expected: vec![c.nrows()],
                found: vec![initialized.len()],
            });
        }
        Ok(Self { alpha, c, initialized })
    }

    pub fn prototypes(&self) -> &Array2<f32> {
        &self.c
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    pub fn all_initialized(&self) -> bool {
        self.initialized.iter().all(|&b| b)
    }

    pub fn row(&self, class: usize) -> Vec<f32> {
        self.c.row(class).to_vec()
    }

    /// `alpha * previous + (1 - alpha) * mean`, before renormalization.
    pub fn blend(&self, class: usize, mean: &[f32]) -> Vec<f32> {
        let a = self.alpha;
        self.c.row(class).iter().zip(mean).map(|(p, m)| a * p + (1.0 - a) * m).collect()
    }

    /// Folds in this step's class means; `None` leaves a class unchanged.
    /// A class's first observation becomes its prototype outright.
    pub fn update(&mut self, means: &[Option<Vec<f32>>]) {
        for (class, mean) in means.iter().enumerate() {
            let Some(mean) = mean else { continue };
            let next = if self.initialized[class] { self.blend(class, mean) } else { mean.clone() };
            let next = unit(&next);
            self.c.row_mut(class).iter_mut().zip(&next).for_each(|(d, s)| *d = *s);
            self.initialized[class] = true;
        }
    }
}

/// Class -> anchor permutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    sigma: Vec<usize>,
}

impl Assignment {
    pub fn new(sigma: Vec<usize>) -> Result<Self, AnchorError> {
        let mut seen = vec![false; sigma.len()];
        for &s in &sigma {
            if s >= sigma.len() || seen[s] {
                return Err(AnchorError::NotPermutation(sigma));
            }
            seen[s] = true;
        }
        Ok(Self { sigma })
    }

    pub fn identity(classes: usize) -> Self {
        Self { sigma: (0..classes).collect() }
    }

    pub fn anchor_of(&self, class: usize) -> usize {
        self.sigma[class]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.sigma
    }
}

/// Assignment minimizing the summed Euclidean distance between each class
/// prototype and its anchor; ties go to the lexicographically smallest.
pub fn match_prototypes(anchors: &AnchorSet, bank: &PrototypeBank) -> Result<Assignment, AnchorError> {
    if let Some(class) = bank.initialized.iter().position(|&b| !b) {
        return Err(AnchorError::UninitializedPrototype(class));
    }
    let c = anchors.classes();
    if bank.c.dim() != (c, anchors.dim()) {
        return Err(AnchorError::ShapeMismatch {
            expected: vec![c, anchors.dim()],
            found: bank.c.shape().to_vec(),
        });
    }
    let cost: Vec<f64> = (0..c)
        .flat_map(|class| (0..c).map(move |a| (class, a)))
        .map(|(class, a)| distance(anchors.row(a), bank.c.row(class).as_slice().expect("contiguous row")))
        .collect();
    Assignment::new(solve_lexicographic(&cost, c))
}

/// Per-class FIFO queues of unit-norm features with their insertion
/// confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub capacity: usize,
    /// Features are admitted only with confidence strictly above this.
    pub threshold: f32,
    dim: usize,
    queues: Vec<VecDeque<(Vec<f32>, f32)>>,
}

impl MemoryBank {
    pub fn new(classes: usize, dim: usize, capacity: usize, threshold: f32) -> Self {
        Self {
            capacity,
            threshold,
            dim,
            queues: vec![VecDeque::new(); classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.queues.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self, class: usize) -> usize {
        self.queues[class].len()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(|q| q.is_empty())
    }

    /// Oldest first.
    pub fn entries(&self, class: usize) -> impl Iterator<Item = (&[f32], f32)> {
        self.queues[class].iter().map(|(f, c)| (f.as_slice(), *c))
    }

    /// Mean of the stored (unit) features of a class, `None` when empty.
    pub fn mean_feature(&self, class: usize) -> Option<Vec<f64>> {
        let q = &self.queues[class];
        if q.is_empty() {
            return None;
        }
        let mut mean = vec![0.0f64; self.dim];
        for (f, _) in q {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += *v as f64);
        }
        let inv = 1.0 / q.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        Some(mean)
    }

    /// Appends one feature (normalized) to a class queue if its confidence
    /// clears the threshold, evicting the oldest entries beyond capacity.
    /// Returns whether it was admitted.
    pub fn push(&mut self, class: usize, feature: &[f32], confidence: f32) -> bool {
        assert_eq!(feature.len(), self.dim, "feature dimension");
        if !(confidence > self.threshold) {
            return false;
        }
        let q = &mut self.queues[class];
        q.push_back((unit(feature), confidence));
        while q.len() > self.capacity {
            q.pop_front();
        }
        true
    }

    /// Keeps features with confidence above the threshold, ranks each class's
    /// survivors by distance to the class's anchor and enqueues the `k`
    /// closest, nearest first. `features` is row-major `[n, D]`.
    pub fn proximity_guided_insert(
        &mut self,
        features: &[f32],
        confidences: &[f32],
        labels: &[usize],
        anchors: &AnchorSet,
        sigma: &Assignment,
        k: usize,
    ) {
        let d = self.dim;
        assert_eq!(features.len(), labels.len() * d, "feature rows");
        assert_eq!(confidences.len(), labels.len(), "confidence count");
        for class in 0..self.classes() {
            let anchor = anchors.row(sigma.anchor_of(class));
            let mut cands: Vec<(f64, usize)> = labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| l == class && confidences[i] > self.threshold)
                .map(|(i, _)| (distance(&unit(&features[i * d..(i + 1) * d]), anchor), i))
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, i) in cands.iter().take(k) {
                self.push(class, &features[i * d..(i + 1) * d], confidences[i]);
            }
        }
    }

    /// Flattened `[total, D]` features, confidences and per-class lengths.
    pub fn to_parts(&self) -> (Vec<f32>, Vec<f32>, Vec<usize>) {
        let mut feats = Vec::new();
        let mut confs = Vec::new();
        let mut lens = Vec::new();
        for q in &self.queues {
            lens.push(q.len());
            for (f, c) in q {
                feats.extend_from_slice(f);
                confs.push(*c);
            }
        }
        (feats, confs, lens)
    }

    pub fn from_parts(
        dim: usize,
        capacity: usize,
        threshold: f32,
        features: &[f32],
        confidences: &[f32],
        lengths: &[usize],
    ) -> Result<Self, AnchorError> {
        let total: usize = lengths.iter().sum();
        if features.len() != total * dim || confidences.len() != total {
            return Err(AnchorError::ShapeMismatch {
                expected: vec![total, dim],
                found: vec![confidences.len(), features.len()],
            });
        }
        let mut queues = Vec::with_capacity(lengths.len());
        let mut at = 0;
        for &len in lengths {
            let q = (at..at + len)
                .map(|i| (features[i * dim..(i + 1) * dim].to_vec(), confidences[i]))
                .collect();
            queues.push(q);
            at += len;
        }
        Ok(Self { capacity, threshold, dim, queues })
    }
}
