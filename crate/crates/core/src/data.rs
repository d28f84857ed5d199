//! Synthetic long-tail segmentation scenes and labeled/unlabeled sampling.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{read_f32_shaped, read_image, read_labels, write_image, write_labels, write_tensor, FormatError, Tensor};
use crate::rng::Rng;
use crate::tensor::{Image, LabelMap, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("dataset i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

fn default_num_val() -> usize {
    16
}

fn default_blobs() -> usize {
    48
}

fn default_radius() -> (f64, f64) {
    (0.08, 0.28)
}

/// Generator parameters for one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Expected pixel share per class; positive and summing to one.
    pub class_frequencies: Vec<f64>,
    /// Noise standard deviation per channel is `1 / snr` for unit-norm
    /// class signatures; `snr = inf` is noiseless.
    pub snr: f64,
    pub num_labeled: usize,
    pub num_unlabeled: usize,
    #[serde(default = "default_num_val")]
    pub num_val: usize,
    pub seed: u64,
    #[serde(default = "default_blobs")]
    pub blobs_per_image: usize,
    /// Ellipse semi-axis range as a fraction of the image side.
    #[serde(default = "default_radius")]
    pub blob_radius: (f64, f64),
}

impl DatasetSpec {
    /// Six-class long-tail scene used for desk-scale runs.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            num_classes: 6,
            width: 64,
            height: 64,
            channels: 8,
            class_frequencies: vec![0.40, 0.25, 0.15, 0.12, 0.05, 0.03],
            snr: 1.5,
            num_labeled: 4,
            num_unlabeled: 64,
            num_val: 16,
            seed,
            blobs_per_image: default_blobs(),
            blob_radius: default_radius(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.num_classes < 1 || self.num_classes > 254 {
            return bad(format!("num_classes {} outside 1..=254", self.num_classes));
        }
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return bad("image dimensions must be at least 1".into());
        }
        if self.class_frequencies.len() != self.num_classes {
            return bad(format!(
                "{} class frequencies for {} classes",
                self.class_frequencies.len(),
                self.num_classes
            ));
        }
        if let Some(c) = self.class_frequencies.iter().position(|&f| !(f > 0.0)) {
            return bad(format!("class {c} has non-positive frequency"));
        }
        let sum: f64 = self.class_frequencies.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("class frequencies sum to {sum}, not 1"));
        }
        if !(self.snr > 0.0) {
            return bad("snr must be positive".into());
        }
        if self.num_labeled < 1 || self.num_unlabeled < 1 {
            return bad("need at least one labeled and one unlabeled image".into());
        }
        let (lo, hi) = self.blob_radius;
        if !(lo > 0.0 && lo <= hi) {
            return bad("blob radius range must satisfy 0 < lo <= hi".into());
        }
        Ok(())
    }

    pub fn noise_std(&self) -> f64 {
        if self.snr.is_infinite() {
            0.0
        } else {
            1.0 / self.snr
        }
    }
}

/// An image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledItem {
    pub image: Image,
    pub label: LabelMap,
}

/// An image without ground truth. Training code only ever sees this type
/// for the unlabeled split.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledItem {
    pub image: Image,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    /// Unit-norm class signature per row, `[C, F]`.
    pub signatures: Array2<f32>,
    pub labeled: Vec<LabeledItem>,
    pub unlabeled: Vec<UnlabeledItem>,
    /// Ground truth of the unlabeled split, kept for diagnostics only.
    pub unlabeled_truth: Vec<LabelMap>,
    pub val: Vec<LabeledItem>,
}

const SIGNATURE_STREAM: u64 = 0;
const LABELED_STREAM: u64 = 1 << 32;
const UNLABELED_STREAM: u64 = 2 << 32;
const VAL_STREAM: u64 = 3 << 32;

fn class_signatures(spec: &DatasetSpec) -> Array2<f32> {
    let (c, f) = (spec.num_classes, spec.channels);
    let mut rng = Rng::with_stream(spec.seed, SIGNATURE_STREAM);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
    for i in 0..c {
        let mut v: Vec<f64> = (0..f).map(|_| rng.normal()).collect();
        // Gram-Schmidt while the space has room; afterwards plain random directions.
        if i < f {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|a| *a /= norm);
        rows.push(v);
    }
    Array2::from_shape_fn((c, f), |(i, j)| rows[i][j] as f32)
}

/// Stamps random ellipses over a class-0 background.
fn scene_labels(spec: &DatasetSpec, rng: &mut Rng) -> Array2<u8> {
    let (w, h) = (spec.width, spec.height);
    let mut labels = Array2::<u8>::zeros((w, h));
    let (rlo, rhi) = spec.blob_radius;
    for _ in 0..spec.blobs_per_image {
        let class = rng.categorical(&spec.class_frequencies) as u8;
        let cx = rng.uniform() * w as f64;
        let cy = rng.uniform() * h as f64;
        let ax = rng.uniform_range(rlo, rhi) * w as f64;
        let ay = rng.uniform_range(rlo, rhi) * h as f64;
        let x0 = (cx - ax).floor().max(0.0) as usize;
        let x1 = ((cx + ax).ceil() as usize).min(w);
        let y0 = (cy - ay).floor().max(0.0) as usize;
        let y1 = ((cy + ay).ceil() as usize).min(h);
        for x in x0..x1 {
            for y in y0..y1 {
                let dx = (x as f64 + 0.5 - cx) / ax;
                let dy = (y as f64 + 0.5 - cy) / ay;
                if dx * dx + dy * dy <= 1.0 {
                    labels[[x, y]] = class;
                }
            }
        }
    }
    labels
}

fn render(spec: &DatasetSpec, signatures: &Array2<f32>, labels: &Array2<u8>, rng: &mut Rng) -> Array3<f32> {
    let noise = spec.noise_std();
    let (w, h, f) = (spec.width, spec.height, spec.channels);
    let mut data = Array3::<f32>::zeros((w, h, f));
    for x in 0..w {
        for y in 0..h {
            let class = labels[[x, y]] as usize;
            for k in 0..f {
                let n = if noise > 0.0 { noise * rng.normal() } else { 0.0 };
                data[[x, y, k]] = signatures[[class, k]] + n as f32;
            }
        }
    }
    data
}

fn generate_item(spec: &DatasetSpec, signatures: &Array2<f32>, stream: u64, id: String) -> Result<LabeledItem, DataError> {
    let mut rng = Rng::with_stream(spec.seed, stream);
    let labels = scene_labels(spec, &mut rng);
    let data = render(spec, signatures, &labels, &mut rng);
    Ok(LabeledItem {
        image: Image::new(id, data)?,
        label: LabelMap::new(labels, spec.num_classes)?,
    })
}

/// Generates labeled, unlabeled and validation splits. Every image draws
/// from its own derived stream, so splits are reproducible independently.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let signatures = class_signatures(spec);
    let labeled = (0..spec.num_labeled)
        .map(|i| generate_item(spec, &signatures, LABELED_STREAM + i as u64, format!("l{i:05}")))
        .collect::<Result<Vec<_>, _>>()?;
    let mut unlabeled = Vec::with_capacity(spec.num_unlabeled);
    let mut unlabeled_truth = Vec::with_capacity(spec.num_unlabeled);
    for i in 0..spec.num_unlabeled {
        let item = generate_item(spec, &signatures, UNLABELED_STREAM + i as u64, format!("u{i:05}"))?;
        unlabeled.push(UnlabeledItem { image: item.image });
        unlabeled_truth.push(item.label);
    }
    let val = (0..spec.num_val)
        .map(|i| generate_item(spec, &signatures, VAL_STREAM + i as u64, format!("v{i:05}")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        signatures,
        labeled,
        unlabeled,
        unlabeled_truth,
        val,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    spec: DatasetSpec,
    labeled: Vec<String>,
    unlabeled: Vec<String>,
    val: Vec<String>,
}

/// Writes every split as tensor files plus `manifest.json`:
/// `<split>/<id>.image.stpg` and `<split>/<id>.label.stpg` (the unlabeled
/// split's ground truth is stored too, for diagnostics).
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<(), DataError> {
    for split in ["labeled", "unlabeled", "val"] {
        std::fs::create_dir_all(dir.join(split))?;
    }
    let write_items = |split: &str, items: &mut dyn Iterator<Item = (&Image, &LabelMap)>| -> Result<Vec<String>, DataError> {
        let mut ids = Vec::new();
        for (img, label) in items {
            write_image(dir.join(split).join(format!("{}.image.stpg", img.id())), img)?;
            write_labels(dir.join(split).join(format!("{}.label.stpg", img.id())), label)?;
            ids.push(img.id().to_string());
        }
        Ok(ids)
    };
    let labeled = write_items("labeled", &mut data.labeled.iter().map(|i| (&i.image, &i.label)))?;
    let unlabeled = write_items(
        "unlabeled",
        &mut data.unlabeled.iter().zip(&data.unlabeled_truth).map(|(i, t)| (&i.image, t)),
    )?;
    let val = write_items("val", &mut data.val.iter().map(|i| (&i.image, &i.label)))?;
    let sig = data.signatures.clone().into_dyn();
    write_tensor(dir.join("signatures.stpg"), &Tensor::F32(sig))?;
    let manifest = DatasetManifest { spec: data.spec.clone(), labeled, unlabeled, val };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a directory produced by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let spec = manifest.spec;
    let c = spec.num_classes;
    let read_items = |split: &str, ids: &[String]| -> Result<Vec<LabeledItem>, DataError> {
        ids.iter()
            .map(|id| {
                Ok(LabeledItem {
                    image: read_image(dir.join(split).join(format!("{id}.image.stpg")), id.clone())?,
                    label: read_labels(dir.join(split).join(format!("{id}.label.stpg")), c)?,
                })
            })
            .collect()
    };
    let labeled = read_items("labeled", &manifest.labeled)?;
    let (unlabeled, unlabeled_truth) = read_items("unlabeled", &manifest.unlabeled)?
        .into_iter()
        .map(|i| (UnlabeledItem { image: i.image }, i.label))
        .unzip();
    let val = read_items("val", &manifest.val)?;
    let signatures = read_f32_shaped(dir.join("signatures.stpg"), &[c, spec.channels])?
        .into_dimensionality()
        .expect("shape checked");
    Ok(Dataset { spec, signatures, labeled, unlabeled, unlabeled_truth, val })
}

/// Equal numbers of labeled and unlabeled items for one step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub labeled: Vec<LabeledItem>,
    pub unlabeled: Vec<UnlabeledItem>,
}

/// Shuffled cycling over one split: each pass visits every index once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cycler {
    order: Vec<usize>,
    cursor: usize,
}

impl Cycler {
    pub fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            // forces a shuffle on first draw
            cursor: len,
        }
    }

    pub fn next(&mut self, rng: &mut Rng) -> usize {
        if self.cursor >= self.order.len() {
            rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        i
    }
}

/// Sampling position over both training splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSampler {
    labeled: Cycler,
    unlabeled: Cycler,
}

impl BatchSampler {
    pub fn new(num_labeled: usize, num_unlabeled: usize) -> Self {
        Self {
            labeled: Cycler::new(num_labeled),
            unlabeled: Cycler::new(num_unlabeled),
        }
    }

    /// Draws `batch_size` labeled and `batch_size` unlabeled items.
    pub fn sample(
        &mut self,
        labeled: &[LabeledItem],
        unlabeled: &[UnlabeledItem],
        batch_size: usize,
        rng: &mut Rng,
    ) -> Batch {
        let labeled = self.sample_labeled(labeled, batch_size, rng);
        let unlabeled = self.sample_unlabeled(unlabeled, batch_size, rng);
        Batch { labeled, unlabeled }
    }

    pub fn sample_labeled(&mut self, items: &[LabeledItem], batch_size: usize, rng: &mut Rng) -> Vec<LabeledItem> {
        assert!(!items.is_empty(), "empty labeled split");
        (0..batch_size).map(|_| items[self.labeled.next(rng)].clone()).collect()
    }

    pub fn sample_unlabeled(&mut self, items: &[UnlabeledItem], batch_size: usize, rng: &mut Rng) -> Vec<UnlabeledItem> {
        assert!(!items.is_empty(), "empty unlabeled split");
        (0..batch_size).map(|_| items[self.unlabeled.next(rng)].clone()).collect()
    }
}

/// One-shot batch draw with a fresh sampler.
pub fn sample_batch(labeled: &[LabeledItem], unlabeled: &[UnlabeledItem], batch_size: usize, rng: &mut Rng) -> Batch {
    BatchSampler::new(labeled.len(), unlabeled.len()).sample(labeled, unlabeled, batch_size, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetSpec {
        DatasetSpec {
            num_classes: 2,
            width: 16,
            height: 16,
            channels: 4,
            class_frequencies: vec![0.5, 0.5],
            snr: f64::INFINITY,
            num_labeled: 2,
            num_unlabeled: 3,
            num_val: 2,
            seed,
            blobs_per_image: default_blobs(),
            blob_radius: default_radius(),
        }
    }

    #[test]
    fn noiseless_is_linearly_separable() {
        let ds = generate_dataset(&small(1)).unwrap();
        let sig = &ds.signatures;
        for item in ds.labeled.iter().chain(&ds.val) {
            let data = item.image.data();
            for x in 0..16 {
                for y in 0..16 {
                    let scores: Vec<f32> = (0..2)
                        .map(|c| (0..4).map(|k| data[[x, y, k]] * sig[[c, k]]).sum())
                        .collect();
                    let pred = crate::tensor::argmax(&scores);
                    assert_eq!(Some(pred), item.label.get(x, y));
                }
            }
        }
    }

    #[test]
    fn tail_share_matches_frequency() {
        let spec = DatasetSpec {
            num_classes: 6,
            class_frequencies: vec![0.4, 0.3, 0.14, 0.12, 0.02, 0.02],
            num_labeled: 100,
            num_unlabeled: 1,
            num_val: 0,
            width: 32,
            height: 32,
            ..small(9)
        };
        let ds = generate_dataset(&spec).unwrap();
        let mut counts = vec![0u64; 6];
        for item in &ds.labeled {
            for (c, n) in item.label.histogram(6).into_iter().enumerate() {
                counts[c] += n;
            }
        }
        let total: u64 = counts.iter().sum();
        for c in [4, 5] {
            let share = counts[c] as f64 / total as f64;
            assert!((share - 0.02).abs() <= 0.01, "class {c} share {share}");
        }
    }

    #[test]
    fn zero_frequency_rejected() {
        let spec = DatasetSpec {
            class_frequencies: vec![1.0, 0.0],
            ..small(1)
        };
        assert!(matches!(generate_dataset(&spec), Err(DataError::InvalidSpec(_))));
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(&small(4)).unwrap();
        let b = generate_dataset(&small(4)).unwrap();
        assert_eq!(a.labeled, b.labeled);
        assert_eq!(a.unlabeled, b.unlabeled);
        assert_eq!(a.val, b.val);
        let c = generate_dataset(&small(5)).unwrap();
        assert_ne!(a.labeled, c.labeled);
    }

    #[test]
    fn batch_sizes_equal() {
        let ds = generate_dataset(&small(2)).unwrap();
        let mut rng = Rng::new(0);
        let b = sample_batch(&ds.labeled, &ds.unlabeled, 3, &mut rng);
        assert_eq!(b.labeled.len(), 3);
        assert_eq!(b.unlabeled.len(), 3);
    }

    #[test]
    fn single_labeled_image_repeats() {
        let spec = DatasetSpec { num_labeled: 1, ..small(2) };
        let ds = generate_dataset(&spec).unwrap();
        let mut sampler = BatchSampler::new(1, ds.unlabeled.len());
        let mut rng = Rng::new(0);
        for _ in 0..4 {
            let b = sampler.sample(&ds.labeled, &ds.unlabeled, 2, &mut rng);
            assert!(b.labeled.iter().all(|l| l.image.id() == "l00000"));
        }
    }

    #[test]
    fn equal_seeds_equal_batches() {
        let ds = generate_dataset(&small(3)).unwrap();
        let mut s1 = BatchSampler::new(ds.labeled.len(), ds.unlabeled.len());
        let mut s2 = s1.clone();
        let (mut r1, mut r2) = (Rng::new(11), Rng::new(11));
        for _ in 0..10 {
            let a = s1.sample(&ds.labeled, &ds.unlabeled, 2, &mut r1);
            let b = s2.sample(&ds.labeled, &ds.unlabeled, 2, &mut r2);
            let ids = |b: &Batch| -> Vec<String> {
                b.labeled.iter().map(|l| l.image.id().to_string())
                    .chain(b.unlabeled.iter().map(|u| u.image.id().to_string()))
                    .collect()
            };
            assert_eq!(ids(&a), ids(&b));
        }
    }

    #[test]
    fn shuffled_cycling_covers_split() {
        let mut c = Cycler::new(5);
        let mut rng = Rng::new(8);
        let mut seen: Vec<usize> = (0..5).map(|_| c.next(&mut rng)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }
}
