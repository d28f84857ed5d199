//! Pixel selection for the professional module.
//!
//! The Pro-Student / Gen-Teacher confusion matrix of a mini-batch yields a
//! class-level mismatch score `I`. Each Gen-Teacher pseudo-label is then
//! routed to exactly one of three sets:
//!
//! * consistent: both models predict the same class;
//! * highly mismatched: they disagree and `I[student] < I[teacher]`;
//! * low mismatched: every remaining pixel.
//!
//! Pro-Student trains on consistent + highly mismatched labels weighted by
//! teacher confidence. Gen-Student trains on every Pro-Teacher label.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use crate::loss::{weighted_ce_loss, Normalization};
use crate::tensor::{argmax, one_hot, OneHotMap, ProbabilityMap, TensorError, WeightMap, IGNORE};
use crate::tensor::LabelMap;

/// `counts[p * C + q]` = pixels where Pro-Student says `p` and Gen-Teacher says `q`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), classes * classes, "counts must be C x C");
        Self { classes, counts }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, p: usize, q: usize) -> u64 {
        self.counts[p * self.classes + q]
    }

    pub fn record(&mut self, p: usize, q: usize) {
        self.counts[p * self.classes + q] += 1;
    }

    /// Adds one image pair; pixels marked `IGNORE` in either map are skipped.
    pub fn add_maps(&mut self, pro: &LabelMap, gen: &LabelMap) {
        assert_eq!(pro.data().shape(), gen.data().shape(), "prediction shapes differ");
        for (&p, &q) in pro.as_slice().iter().zip(gen.as_slice()) {
            if p != IGNORE && q != IGNORE {
                self.record(p as usize, q as usize);
            }
        }
    }

    /// Associative reduction of partial matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.classes).all(|p| (0..self.classes).all(|q| p == q || self.get(p, q) == 0))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    /// Comma-separated rows, one line per Pro-Student class.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for p in 0..self.classes {
            let row: Vec<String> = (0..self.classes).map(|q| self.get(p, q).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Confusion matrix of two hard prediction maps.
pub fn build_confusion(pro_pred: &LabelMap, gen_pred: &LabelMap, classes: usize) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::new(classes);
    m.add_maps(pro_pred, gen_pred);
    m
}

/// Per-class mismatch score, each entry in `[0, 2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchScores(pub Vec<f64>);

impl MismatchScores {
    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }
}

/// Scores from a real-valued `C x C` matrix (row = student, column = teacher).
/// A fraction whose denominator is zero counts as zero.
pub fn mismatch_from_counts(counts: &[f64], classes: usize) -> MismatchScores {
    let mut row = vec![0.0; classes];
    let mut col = vec![0.0; classes];
    for p in 0..classes {
        for q in 0..classes {
            let v = counts[p * classes + q];
            row[p] += v;
            col[q] += v;
        }
    }
    let frac = |total: f64, diag: f64| if total > 0.0 { (total - diag) / total } else { 0.0 };
    MismatchScores(
        (0..classes)
            .map(|q| {
                let d = counts[q * classes + q];
                frac(row[q], d) + frac(col[q], d)
            })
            .collect(),
    )
}

pub fn mismatch_scores(m: &ConfusionMatrix) -> MismatchScores {
    mismatch_from_counts(&m.to_f64(), m.classes)
}

/// Where mismatch scores come from at each step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ConfusionSource {
    /// The current mini-batch only.
    #[default]
    PerBatch,
    /// Exponential moving average of per-batch matrices.
    Ema { decay: f64 },
}

/// Running state behind [`ConfusionSource`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionTracker {
    pub source: ConfusionSource,
    pub accumulated: Option<Vec<f64>>,
}

impl ConfusionTracker {
    pub fn new(source: ConfusionSource) -> Self {
        Self { source, accumulated: None }
    }

    pub fn observe(&mut self, batch: &ConfusionMatrix) -> MismatchScores {
        match self.source {
            ConfusionSource::PerBatch => mismatch_scores(batch),
            ConfusionSource::Ema { decay } => {
                let current = batch.to_f64();
                let acc = match self.accumulated.take() {
                    Some(prev) => prev.iter().zip(&current).map(|(a, b)| decay * a + (1.0 - decay) * b).collect(),
                    None => current,
                };
                let scores = mismatch_from_counts(&acc, batch.classes);
                self.accumulated = Some(acc);
                scores
            }
        }
    }
}

/// The three pixel-disjoint parts of the Gen-Teacher pseudo-label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelPartition {
    pub cons: OneHotMap,
    pub hmis: OneHotMap,
    pub lmis: OneHotMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub cons: usize,
    pub hmis: usize,
    pub lmis: usize,
}

impl std::ops::AddAssign for PartitionCounts {
    fn add_assign(&mut self, o: Self) {
        self.cons += o.cons;
        self.hmis += o.hmis;
        self.lmis += o.lmis;
    }
}

impl PseudoLabelPartition {
    pub fn counts(&self) -> PartitionCounts {
        PartitionCounts {
            cons: self.cons.count_active(),
            hmis: self.hmis.count_active(),
            lmis: self.lmis.count_active(),
        }
    }

    /// Elementwise sum of the parts.
    pub fn union(&self) -> OneHotMap {
        let sum = self.cons.data() + self.hmis.data() + self.lmis.data();
        OneHotMap::new(sum).expect("parts are pixel-disjoint")
    }

    /// Union of the parts enabled by `mode`.
    pub fn select(&self, mode: SelectionMode) -> OneHotMap {
        let zero = || ndarray::Array3::<u8>::zeros(self.cons.data().raw_dim());
        let hmis = if mode.uses_hmis() { self.hmis.data().clone() } else { zero() };
        let lmis = if mode.uses_lmis() { self.lmis.data().clone() } else { zero() };
        OneHotMap::new(self.cons.data() + &hmis + &lmis).expect("parts are pixel-disjoint")
    }
}

fn same_shape(a: &ProbabilityMap, b: &ProbabilityMap) -> Result<(), TensorError> {
    if a.data().shape() != b.data().shape() {
        return Err(TensorError::ShapeMismatch {
            expected: a.data().shape().to_vec(),
            found: b.data().shape().to_vec(),
        });
    }
    Ok(())
}

/// Routes every Gen-Teacher pseudo-label to cons, hmis or lmis.
pub fn partition_pseudo_labels(
    pro_prob: &ProbabilityMap,
    gen_prob: &ProbabilityMap,
    scores: &MismatchScores,
) -> Result<PseudoLabelPartition, TensorError> {
    same_shape(pro_prob, gen_prob)?;
    let (w, h, c) = (gen_prob.width(), gen_prob.height(), gen_prob.classes());
    let mut cons = Vec::with_capacity(w * h);
    let mut hmis = Vec::with_capacity(w * h);
    let mut lmis = Vec::with_capacity(w * h);
    for (ps, gs) in pro_prob.pixels().zip(gen_prob.pixels()) {
        let p = argmax(ps);
        let q = argmax(gs);
        let (a, b, d) = if p == q {
            (Some(q), None, None)
        } else if scores.get(p) < scores.get(q) {
            (None, Some(q), None)
        } else {
            (None, None, Some(q))
        };
        cons.push(a);
        hmis.push(b);
        lmis.push(d);
    }
    Ok(PseudoLabelPartition {
        cons: OneHotMap::from_classes(w, h, c, cons),
        hmis: OneHotMap::from_classes(w, h, c, hmis),
        lmis: OneHotMap::from_classes(w, h, c, lmis),
    })
}

/// Teacher max-probability where `selection` is active, zero elsewhere.
pub fn confidence_weights(teacher_prob: &ProbabilityMap, selection: &OneHotMap) -> WeightMap {
    let max = teacher_prob.max_prob();
    let mut out = WeightMap::zeros(teacher_prob.width(), teacher_prob.height());
    for ((o, &m), class) in out.as_slice_mut().iter_mut().zip(max.iter()).zip(selection.classes_per_pixel()) {
        if class.is_some() {
            *o = m;
        }
    }
    out
}

/// Which parts of the partition supervise Pro-Student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    ConsOnly,
    ConsLmis,
    #[default]
    ConsHmis,
    /// Every pseudo-label (pixel selection disabled).
    All,
}

impl SelectionMode {
    pub fn uses_hmis(self) -> bool {
        matches!(self, SelectionMode::ConsHmis | SelectionMode::All)
    }

    pub fn uses_lmis(self) -> bool {
        matches!(self, SelectionMode::ConsLmis | SelectionMode::All)
    }
}

/// Supervision for one student over an unlabeled batch.
#[derive(Debug, Clone)]
pub struct StepTargets {
    pub targets: Vec<OneHotMap>,
    pub weights: Vec<WeightMap>,
}

#[derive(Debug, Clone)]
pub struct ProfessionalTargets {
    pub step: StepTargets,
    pub partitions: Vec<PseudoLabelPartition>,
    pub confusion: ConfusionMatrix,
    pub scores: MismatchScores,
}

impl ProfessionalTargets {
    pub fn partition_counts(&self) -> PartitionCounts {
        let mut total = PartitionCounts::default();
        for p in &self.partitions {
            total += p.counts();
        }
        total
    }
}

fn masked_argmax(prob: &ProbabilityMap, valid: Option<&Array2<bool>>) -> LabelMap {
    let mut hard = prob.argmax();
    if let Some(v) = valid {
        let data: Array2<u8> = ndarray::Zip::from(hard.data())
            .and(v)
            .map_collect(|&c, &ok| if ok { c } else { IGNORE });
        hard = LabelMap::new(data, prob.classes()).expect("classes in range");
    }
    hard
}

fn clear_invalid(target: OneHotMap, weights: &mut WeightMap, valid: Option<&Array2<bool>>) -> OneHotMap {
    let Some(v) = valid else { return target };
    let (w, h, c) = (target.width(), target.height(), target.classes());
    let classes: Vec<Option<usize>> = target
        .classes_per_pixel()
        .zip(v.iter())
        .map(|(cls, &ok)| if ok { cls } else { None })
        .collect();
    for (wt, &ok) in weights.as_slice_mut().iter_mut().zip(v.iter()) {
        if !ok {
            *wt = 0.0;
        }
    }
    OneHotMap::from_classes(w, h, c, classes)
}

/// Pro-Student supervision: confusion over the batch, mismatch scores via
/// `scores_from`, partition per image, then confidence weights on the
/// selected parts. Pixels outside `valid` are excluded from the confusion
/// matrix and from the targets.
pub fn professional_step_targets_with(
    student_probs: &[ProbabilityMap],
    teacher_probs: &[ProbabilityMap],
    valid: Option<&[Array2<bool>]>,
    mode: SelectionMode,
    scores_from: impl FnOnce(&ConfusionMatrix) -> MismatchScores,
) -> Result<ProfessionalTargets, TensorError> {
    assert_eq!(student_probs.len(), teacher_probs.len(), "batch sizes differ");
    let classes = teacher_probs.first().map_or(1, |p| p.classes());
    let mut confusion = ConfusionMatrix::new(classes);
    for (i, (s, t)) in student_probs.iter().zip(teacher_probs).enumerate() {
        same_shape(s, t)?;
        let v = valid.map(|v| &v[i]);
        confusion.add_maps(&masked_argmax(s, v), &masked_argmax(t, v));
    }
    let scores = scores_from(&confusion);
    let mut partitions = Vec::with_capacity(teacher_probs.len());
    let mut targets = Vec::with_capacity(teacher_probs.len());
    let mut weights = Vec::with_capacity(teacher_probs.len());
    for (i, (s, t)) in student_probs.iter().zip(teacher_probs).enumerate() {
        let part = partition_pseudo_labels(s, t, &scores)?;
        let selected = part.select(mode);
        let mut w = confidence_weights(t, &selected);
        let selected = clear_invalid(selected, &mut w, valid.map(|v| &v[i]));
        partitions.push(part);
        targets.push(selected);
        weights.push(w);
    }
    Ok(ProfessionalTargets {
        step: StepTargets { targets, weights },
        partitions,
        confusion,
        scores,
    })
}

/// [`professional_step_targets_with`] using per-batch scores.
pub fn professional_step_targets(
    student_probs: &[ProbabilityMap],
    teacher_probs: &[ProbabilityMap],
    valid: Option<&[Array2<bool>]>,
    mode: SelectionMode,
) -> Result<ProfessionalTargets, TensorError> {
    professional_step_targets_with(student_probs, teacher_probs, valid, mode, mismatch_scores)
}

/// Gen-Student supervision: every Pro-Teacher pseudo-label, weighted by
/// Pro-Teacher's max probability.
pub fn general_step_targets(teacher_probs: &[ProbabilityMap], valid: Option<&[Array2<bool>]>) -> StepTargets {
    let mut targets = Vec::with_capacity(teacher_probs.len());
    let mut weights = Vec::with_capacity(teacher_probs.len());
    for (i, t) in teacher_probs.iter().enumerate() {
        let full = one_hot(t);
        let mut w = confidence_weights(t, &full);
        let full = clear_invalid(full, &mut w, valid.map(|v| &v[i]));
        targets.push(full);
        weights.push(w);
    }
    StepTargets { targets, weights }
}
