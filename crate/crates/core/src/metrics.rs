//! Segmentation metrics and the per-step training telemetry stream.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{predict, ModelParams};
use crate::data::LabeledItem;
use crate::selection::PartitionCounts;
use crate::tensor::{LabelMap, TensorError, IGNORE};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("validation set is empty")]
    EmptyValidation,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("telemetry i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("telemetry line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}

/// Evaluation confusion matrix: `counts[gt * C + pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalConfusion {
    classes: usize,
    counts: Vec<u64>,
}

impl EvalConfusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, truth: &LabelMap, pred: &LabelMap) {
        assert_eq!(truth.data().shape(), pred.data().shape(), "map shapes differ");
        for (&t, &p) in truth.as_slice().iter().zip(pred.as_slice()) {
            if t != IGNORE && p != IGNORE {
                self.counts[t as usize * self.classes + p as usize] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &EvalConfusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class appears in neither
    /// ground truth nor predictions.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }
}

/// Mean of the defined entries; zero if none are defined.
pub fn mean_defined(iou: &[Option<f64>]) -> f64 {
    let vals: Vec<f64> = iou.iter().flatten().copied().collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub tail_classes: Vec<usize>,
    /// Mean IoU over the defined tail classes.
    pub tail_miou: Option<f64>,
}

impl EvalReport {
    pub fn from_confusion(m: &EvalConfusion, tail_classes: &[usize], step: usize) -> Self {
        let iou = m.iou();
        let tail: Vec<Option<f64>> = tail_classes.iter().map(|&c| iou[c]).collect();
        Self {
            step,
            miou: mean_defined(&iou),
            pixel_accuracy: m.pixel_accuracy(),
            tail_classes: tail_classes.to_vec(),
            tail_miou: tail.iter().any(Option::is_some).then(|| mean_defined(&tail)),
            iou,
        }
    }
}

/// Classes whose frequency is below `1 / C`.
pub fn default_tail_classes(frequencies: &[f64]) -> Vec<usize> {
    let cut = 1.0 / frequencies.len() as f64;
    (0..frequencies.len()).filter(|&c| frequencies[c] < cut).collect()
}

/// Scores `params` (the Gen-Student) on un-augmented validation images.
pub fn evaluate(
    params: &ModelParams,
    val: &[LabeledItem],
    tail_classes: &[usize],
    step: usize,
) -> Result<EvalReport, MetricsError> {
    if val.is_empty() {
        return Err(MetricsError::EmptyValidation);
    }
    let classes = params.shape.classes;
    let mut m = EvalConfusion::new(classes);
    for item in val {
        let pred = predict(params, &item.image)?.argmax();
        m.add(&item.label, &pred);
    }
    Ok(EvalReport::from_confusion(&m, tail_classes, step))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub general: f64,
    pub professional: f64,
    pub anchor: f64,
    pub similarity: f64,
    pub total: f64,
}

/// One line of `telemetry.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub step: usize,
    pub lr: f32,
    pub losses: LossBreakdown,
    pub skipped: bool,
    pub partition: PartitionCounts,
    pub unlabeled_pixels: usize,
    pub mismatch: Vec<f64>,
    pub bank_occupancy: Vec<usize>,
    pub contrastive_active: bool,
    pub sigma: Option<Vec<usize>>,
}

/// Append-only JSON-lines writer; each record is flushed immediately.
pub struct TelemetryWriter {
    file: File,
    last_step: Option<usize>,
}

impl TelemetryWriter {
    pub fn create(path: &Path) -> Result<Self, MetricsError> {
        Ok(Self { file: File::create(path)?, last_step: None })
    }

    pub fn append_to(path: &Path) -> Result<Self, MetricsError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file, last_step: None })
    }

    pub fn log(&mut self, record: &TelemetryRecord) -> Result<(), MetricsError> {
        if let Some(last) = self.last_step {
            assert!(record.step > last, "telemetry steps must increase");
        }
        let mut line = serde_json::to_string(record).expect("telemetry serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.last_step = Some(record.step);
        Ok(())
    }
}

pub fn read_telemetry(path: &Path) -> Result<Vec<TelemetryRecord>, MetricsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| MetricsError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}
