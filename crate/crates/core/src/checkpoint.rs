//! Training checkpoints: a directory holding `manifest.json` and one tensor
//! file per array. Restoring and continuing reproduces an uninterrupted run
//! bit for bit.

use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{AnchorError, AnchorSet, Assignment, MemoryBank, PrototypeBank};
use crate::backbone::{ModelParams, ModelShape, Sgd};
use crate::config::RunConfig;
use crate::data::BatchSampler;
use crate::io::{read_tensor, write_tensor, FormatError, Tensor};
use crate::metrics::EvalReport;
use crate::rng::{Rng, RngState};
use crate::selection::ConfusionTracker;
use crate::tensor::TensorError;
use crate::train::{Streams, TrainState};

const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checkpoint tensor {name}: {source}")]
    Tensor { name: String, source: FormatError },
    #[error("unsupported checkpoint format {0}")]
    Format(u32),
    #[error("checkpoint was written with a different configuration")]
    ConfigMismatch,
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StreamStates {
    labeled_sample: RngState,
    labeled_aug: RngState,
    unlabeled_sample: RngState,
    unlabeled_aug: RngState,
    contrastive: RngState,
    dropout: RngState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    iteration: usize,
    config: RunConfig,
    model_shape: ModelShape,
    streams: StreamStates,
    sampler: BatchSampler,
    tracker: ConfusionTracker,
    sigma: Option<Assignment>,
    prototype_initialized: Vec<bool>,
    bank_lengths: Vec<usize>,
    consecutive_skips: usize,
    total_skips: usize,
    best: Option<EvalReport>,
}

fn put(dir: &Path, name: &str, shape: &[usize], data: Vec<f32>) -> Result<(), CheckpointError> {
    let arr = ArrayD::from_shape_vec(IxDyn(shape), data).map_err(|_| TensorError::ShapeMismatch {
        expected: shape.to_vec(),
        found: vec![],
    })?;
    write_tensor(dir.join(format!("{name}.stpg")), &Tensor::F32(arr))
        .map_err(|source| CheckpointError::Tensor { name: name.into(), source })
}

fn get(dir: &Path, name: &str) -> Result<ArrayD<f32>, CheckpointError> {
    let wrap = |source| CheckpointError::Tensor { name: name.into(), source };
    read_tensor(dir.join(format!("{name}.stpg"))).and_then(Tensor::into_f32).map_err(wrap)
}

fn get_vec(dir: &Path, name: &str) -> Result<Vec<f32>, CheckpointError> {
    Ok(get(dir, name)?.into_iter().collect())
}

fn get_matrix(dir: &Path, name: &str) -> Result<Array2<f32>, CheckpointError> {
    let arr = get(dir, name)?;
    let found = arr.shape().to_vec();
    arr.into_dimensionality().map_err(|_| CheckpointError::Tensor {
        name: name.into(),
        source: FormatError::ShapeMismatch { expected: vec![0, 0], found },
    })
}

/// Writes `state` into `dir`, replacing any previous checkpoint there.
pub fn save(dir: &Path, state: &TrainState, cfg: &RunConfig) -> Result<(), CheckpointError> {
    std::fs::create_dir_all(dir)?;
    let models = [
        ("gen_student", &state.gen_student),
        ("pro_student", &state.pro_student),
        ("gen_teacher", &state.gen_teacher),
        ("pro_teacher", &state.pro_teacher),
        ("gen_momentum", &state.gen_opt.velocity),
        ("pro_momentum", &state.pro_opt.velocity),
    ];
    for (name, p) in models {
        put(dir, name, &[p.num_params()], p.flatten())?;
    }
    let a = state.anchors.vectors();
    put(dir, "anchors", a.shape(), a.iter().copied().collect())?;
    let pr = state.prototypes.prototypes();
    put(dir, "prototypes", pr.shape(), pr.iter().copied().collect())?;
    let (feats, confs, lens) = state.bank.to_parts();
    let total = confs.len();
    // zero-size tensors are not representable; an empty bank has no files
    for name in ["bank_features", "bank_confidences"] {
        let path = dir.join(format!("{name}.stpg"));
        if path.exists() {
            std::fs::remove_file(path)?;
        }
    }
    if total > 0 {
        put(dir, "bank_features", &[total, state.bank.dim()], feats)?;
        put(dir, "bank_confidences", &[total], confs)?;
    }

    let s = &state.streams;
    let manifest = Manifest {
        format: FORMAT,
        iteration: state.iteration,
        config: cfg.clone(),
        model_shape: state.gen_student.shape,
        streams: StreamStates {
            labeled_sample: s.labeled_sample.state(),
            labeled_aug: s.labeled_aug.state(),
            unlabeled_sample: s.unlabeled_sample.state(),
            unlabeled_aug: s.unlabeled_aug.state(),
            contrastive: s.contrastive.state(),
            dropout: s.dropout.state(),
        },
        sampler: state.sampler.clone(),
        tracker: state.tracker.clone(),
        sigma: state.sigma.clone(),
        prototype_initialized: state.prototypes.initialized().to_vec(),
        bank_lengths: lens,
        consecutive_skips: state.consecutive_skips,
        total_skips: state.total_skips,
        best: state.best.clone(),
    };
    // manifest last, so a complete manifest implies complete tensors
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Restores a checkpoint together with the configuration it was written with.
pub fn load_with_config(dir: &Path) -> Result<(RunConfig, TrainState), CheckpointError> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Format(manifest.format));
    }
    let cfg = manifest.config;
    let shape = manifest.model_shape;
    let model = |name: &str| -> Result<ModelParams, CheckpointError> {
        Ok(ModelParams::from_flat(shape, &get_vec(dir, name)?)?)
    };
    let gen_student = model("gen_student")?;
    let pro_student = model("pro_student")?;
    let mut gen_opt = Sgd::new(&gen_student, cfg.momentum);
    gen_opt.velocity = model("gen_momentum")?;
    let mut pro_opt = Sgd::new(&pro_student, cfg.momentum);
    pro_opt.velocity = model("pro_momentum")?;
    let anchors = AnchorSet::new(get_matrix(dir, "anchors")?, cfg.tau)?;
    let prototypes =
        PrototypeBank::from_parts(get_matrix(dir, "prototypes")?, manifest.prototype_initialized, cfg.prototype_alpha)?;
    let (bank_features, bank_confidences) = if manifest.bank_lengths.iter().sum::<usize>() > 0 {
        (get_vec(dir, "bank_features")?, get_vec(dir, "bank_confidences")?)
    } else {
        (Vec::new(), Vec::new())
    };
    let bank = MemoryBank::from_parts(
        cfg.feature_dim,
        cfg.bank_capacity,
        cfg.phi,
        &bank_features,
        &bank_confidences,
        &manifest.bank_lengths,
    )?;
    let st = &manifest.streams;
    let state = TrainState {
        iteration: manifest.iteration,
        gen_teacher: model("gen_teacher")?,
        pro_teacher: model("pro_teacher")?,
        gen_student,
        pro_student,
        gen_opt,
        pro_opt,
        anchors,
        prototypes,
        sigma: manifest.sigma,
        bank,
        tracker: manifest.tracker,
        sampler: manifest.sampler,
        streams: Streams {
            labeled_sample: Rng::from_state(&st.labeled_sample),
            labeled_aug: Rng::from_state(&st.labeled_aug),
            unlabeled_sample: Rng::from_state(&st.unlabeled_sample),
            unlabeled_aug: Rng::from_state(&st.unlabeled_aug),
            contrastive: Rng::from_state(&st.contrastive),
            dropout: Rng::from_state(&st.dropout),
        },
        consecutive_skips: manifest.consecutive_skips,
        total_skips: manifest.total_skips,
        best: manifest.best,
    };
    Ok((cfg, state))
}

/// Restores a checkpoint, refusing one written under a different config.
pub fn load(dir: &Path, cfg: &RunConfig) -> Result<TrainState, CheckpointError> {
    let (saved, state) = load_with_config(dir)?;
    if &saved != cfg {
        return Err(CheckpointError::ConfigMismatch);
    }
    Ok(state)
}
