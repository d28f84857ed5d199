//! The dual mean-teacher training loop.
//!
//! Every step: supervised loss on weak labeled views, teacher predictions on
//! weak unlabeled views composed into CutMix targets, professional loss on
//! selected Gen-Teacher labels, general loss on all Pro-Teacher labels,
//! anchor and similarity losses once warm-up is over, one SGD step per
//! student, EMA teacher updates, then prototype / assignment / memory-bank
//! maintenance.

use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use thiserror::Error;

use crate::anchors::{
    contrastive_batch_loss, fit_anchors, match_prototypes, AnchorSet, Assignment, MemoryBank, PrototypeBank,
};
use crate::augment::AugmentError;
use crate::backbone::{
    backward, ema_update, forward, forward_with_dropout, poly_lr, Dropout, Forward, ModelParams, Sgd,
};
use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::data::{generate_dataset, BatchSampler, DataError, Dataset};
use crate::loss::{pool, supervised_ce_sum, weighted_ce_sum};
use crate::metrics::{evaluate, EvalReport, LossBreakdown, MetricsError, TelemetryRecord, TelemetryWriter};
use crate::rng::Rng;
use crate::selection::{
    general_step_targets, professional_step_targets_with, ConfusionTracker, PartitionCounts,
};
use crate::tensor::{argmax, LabelMap, ProbabilityMap, TensorError, IGNORE};

/// Stream ids under the run seed.
pub mod streams {
    pub const GEN_INIT: u64 = 1;
    pub const PRO_INIT: u64 = 2;
    pub const ANCHORS: u64 = 3;
    pub const LABELED_SAMPLE: u64 = 4;
    pub const LABELED_AUG: u64 = 5;
    pub const UNLABELED_SAMPLE: u64 = 6;
    pub const UNLABELED_AUG: u64 = 7;
    pub const CONTRASTIVE: u64 = 8;
    pub const DROPOUT: u64 = 9;
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0} consecutive non-finite steps, aborting at iteration {1}")]
    NumericAbort(usize, usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Anchor(#[from] crate::anchors::AnchorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainError::Config(_) => 2,
            TrainError::NumericAbort(..) => 3,
            _ => 1,
        }
    }
}

/// Independent random streams, so switching a branch off does not shift the
/// draws of another.
#[derive(Debug, Clone, PartialEq)]
pub struct Streams {
    pub labeled_sample: Rng,
    pub labeled_aug: Rng,
    pub unlabeled_sample: Rng,
    pub unlabeled_aug: Rng,
    pub contrastive: Rng,
    pub dropout: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            labeled_sample: Rng::with_stream(seed, streams::LABELED_SAMPLE),
            labeled_aug: Rng::with_stream(seed, streams::LABELED_AUG),
            unlabeled_sample: Rng::with_stream(seed, streams::UNLABELED_SAMPLE),
            unlabeled_aug: Rng::with_stream(seed, streams::UNLABELED_AUG),
            contrastive: Rng::with_stream(seed, streams::CONTRASTIVE),
            dropout: Rng::with_stream(seed, streams::DROPOUT),
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub gen_student: ModelParams,
    pub pro_student: ModelParams,
    pub gen_teacher: ModelParams,
    pub pro_teacher: ModelParams,
    pub gen_opt: Sgd,
    pub pro_opt: Sgd,
    pub anchors: AnchorSet,
    pub prototypes: PrototypeBank,
    pub sigma: Option<Assignment>,
    pub bank: MemoryBank,
    pub tracker: ConfusionTracker,
    pub sampler: BatchSampler,
    pub streams: Streams,
    pub consecutive_skips: usize,
    pub total_skips: usize,
    pub best: Option<EvalReport>,
}

impl TrainState {
    pub fn new(cfg: &RunConfig, data: &Dataset) -> Result<Self, TrainError> {
        let shape = cfg.model_shape();
        let gen_student = ModelParams::init(shape, &mut Rng::with_stream(cfg.seed, streams::GEN_INIT));
        let pro_student = ModelParams::init(shape, &mut Rng::with_stream(cfg.seed, streams::PRO_INIT));
        let fit = fit_anchors(
            cfg.dataset.num_classes.max(2),
            cfg.feature_dim,
            cfg.tau,
            &mut Rng::with_stream(cfg.seed, streams::ANCHORS),
        )?;
        let c = cfg.dataset.num_classes;
        let mut anchors = fit.anchors;
        if c < anchors.classes() {
            anchors = AnchorSet::new(anchors.vectors().slice(ndarray::s![..c, ..]).to_owned(), cfg.tau)?;
        }
        Ok(Self {
            iteration: 0,
            gen_opt: Sgd::new(&gen_student, cfg.momentum),
            pro_opt: Sgd::new(&pro_student, cfg.momentum),
            gen_teacher: gen_student.clone(),
            pro_teacher: pro_student.clone(),
            gen_student,
            pro_student,
            anchors,
            prototypes: PrototypeBank::new(c, cfg.feature_dim, cfg.prototype_alpha),
            sigma: None,
            bank: MemoryBank::new(c, cfg.feature_dim, cfg.bank_capacity, cfg.phi),
            tracker: ConfusionTracker::new(cfg.confusion),
            sampler: BatchSampler::new(data.labeled.len(), data.unlabeled.len()),
            streams: Streams::new(cfg.seed),
            consecutive_skips: 0,
            total_skips: 0,
            best: None,
        })
    }

    pub fn contrastive_active(&self, cfg: &RunConfig) -> bool {
        cfg.uses_contrastive() && self.sigma.is_some() && self.iteration >= cfg.warmup
    }
}

fn student_forward(
    params: &ModelParams,
    img: &crate::tensor::Image,
    features: bool,
    cfg: &RunConfig,
    rng: &mut Rng,
) -> Result<Forward, TensorError> {
    if features && cfg.dropout > 0.0 {
        forward_with_dropout(params, img, Dropout { p: cfg.dropout, rng })
    } else {
        forward(params, img, features)
    }
}

fn feature_row(fwd: &Forward, pixel: usize) -> &[f32] {
    let d = fwd.features.as_ref().expect("features computed").dim().2;
    let all = fwd.features.as_ref().expect("features computed").as_slice().expect("standard layout");
    &all[pixel * d..(pixel + 1) * d]
}

#[derive(Debug, Clone, Copy)]
enum Split {
    Labeled,
    Unlabeled,
}

#[derive(Debug, Clone, Copy)]
struct PixelRef {
    split: Split,
    image: usize,
    pixel: usize,
    class: usize,
}

/// Caps each class at `cap` pixels by a partial shuffle.
fn sample_per_class(mut per_class: Vec<Vec<PixelRef>>, cap: usize, rng: &mut Rng) -> Vec<PixelRef> {
    let mut out = Vec::new();
    for cands in per_class.iter_mut() {
        if cands.len() > cap {
            for i in 0..cap {
                let j = i + rng.below(cands.len() - i);
                cands.swap(i, j);
            }
            cands.truncate(cap);
        }
        out.extend_from_slice(cands);
    }
    out
}

/// Per-image gradient buffers for one student.
struct StudentGrads {
    labeled_logits: Vec<Vec<f32>>,
    unlabeled_logits: Vec<Vec<f32>>,
    labeled_features: Vec<Option<Vec<f32>>>,
    unlabeled_features: Vec<Option<Vec<f32>>>,
}

fn scaled(v: Vec<f32>, s: f32) -> Vec<f32> {
    v.into_iter().map(|g| g * s).collect()
}

/// Contrastive loss of one student on the sampled pixels; gradients are
/// scattered into per-image feature buffers already scaled by `lambda_ctr`.
fn contrastive_for_student(
    picks: &[PixelRef],
    lab: &[Forward],
    unl: &[Forward],
    state: &TrainState,
    sigma: &Assignment,
    cfg: &RunConfig,
    grads: &mut StudentGrads,
) -> (f64, f64) {
    let d = cfg.feature_dim;
    let mut feats = Vec::with_capacity(picks.len() * d);
    let mut classes = Vec::with_capacity(picks.len());
    for p in picks {
        let fwd = match p.split {
            Split::Labeled => &lab[p.image],
            Split::Unlabeled => &unl[p.image],
        };
        feats.extend_from_slice(feature_row(fwd, p.pixel));
        classes.push(p.class);
    }
    let out = contrastive_batch_loss(&feats, &classes, &state.anchors, sigma, &state.bank);
    for (k, p) in picks.iter().enumerate() {
        let (buffers, fwd) = match p.split {
            Split::Labeled => (&mut grads.labeled_features, &lab[p.image]),
            Split::Unlabeled => (&mut grads.unlabeled_features, &unl[p.image]),
        };
        let buf = buffers[p.image].get_or_insert_with(|| vec![0.0; fwd.cache.pixels() * d]);
        for (b, g) in buf[p.pixel * d..(p.pixel + 1) * d].iter_mut().zip(&out.grad[k * d..(k + 1) * d]) {
            *b += cfg.lambda_ctr * g;
        }
    }
    (out.anchor, out.similarity)
}

fn apply_backward(params: &ModelParams, lab: &[Forward], unl: &[Forward], g: &StudentGrads) -> ModelParams {
    let mut acc = ModelParams::zeros(params.shape);
    for (i, fwd) in lab.iter().enumerate() {
        backward(params, &fwd.cache, &g.labeled_logits[i], g.labeled_features[i].as_deref(), &mut acc);
    }
    for (i, fwd) in unl.iter().enumerate() {
        backward(params, &fwd.cache, &g.unlabeled_logits[i], g.unlabeled_features[i].as_deref(), &mut acc);
    }
    acc
}

/// One full training iteration. Returns the telemetry record for the step.
pub fn train_step(state: &mut TrainState, cfg: &RunConfig, data: &Dataset) -> Result<TelemetryRecord, TrainError> {
    let c = cfg.dataset.num_classes;
    let (w, h) = (cfg.dataset.width, cfg.dataset.height);
    let bs = cfg.batch_size;
    let lr = poly_lr(state.iteration, &cfg.schedule());
    let ctr_on = state.contrastive_active(cfg);
    let ctr_gen = ctr_on;
    let ctr_pro = ctr_on && !cfg.contrastive_gen_only;

    // (1) supervised branch on weak labeled views
    let labeled = state.sampler.sample_labeled(&data.labeled, bs, &mut state.streams.labeled_sample);
    let mut lab_views = Vec::with_capacity(bs);
    for item in &labeled {
        let rec = cfg.augment.weak_record(&mut state.streams.labeled_aug);
        lab_views.push((rec.apply_image(&item.image), rec.apply_labels(&item.label, c)));
    }
    let mut gen_lab = Vec::with_capacity(bs);
    let mut pro_lab = Vec::with_capacity(bs);
    for (img, _) in &lab_views {
        gen_lab.push(student_forward(&state.gen_student, img, ctr_gen, cfg, &mut state.streams.dropout)?);
        pro_lab.push(student_forward(&state.pro_student, img, ctr_pro, cfg, &mut state.streams.dropout)?);
    }
    let sup = |fwds: &[Forward]| {
        pool(fwds.iter().zip(&lab_views).map(|(f, (_, l))| supervised_ce_sum(&f.probabilities(), l)).collect())
    };
    let (ls_gen, gs_gen) = sup(&gen_lab);
    let (ls_pro, gs_pro) = sup(&pro_lab);

    // Gen-Teacher features on the labeled views feed prototypes and the bank.
    let teacher_lab: Vec<Forward> = if cfg.uses_contrastive() {
        lab_views
            .iter()
            .map(|(img, _)| forward(&state.gen_teacher, img, true))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };

    let mut g_gen = StudentGrads {
        labeled_logits: gs_gen.into_iter().map(|g| scaled(g, cfg.lambda_s)).collect(),
        unlabeled_logits: Vec::new(),
        labeled_features: vec![None; bs],
        unlabeled_features: Vec::new(),
    };
    let mut g_pro = StudentGrads {
        labeled_logits: gs_pro.into_iter().map(|g| scaled(g, cfg.lambda_s)).collect(),
        unlabeled_logits: Vec::new(),
        labeled_features: vec![None; bs],
        unlabeled_features: Vec::new(),
    };

    // (2)-(4) unlabeled branch
    let mut gen_unl = Vec::new();
    let mut pro_unl = Vec::new();
    let mut teacher_targets: Vec<ProbabilityMap> = Vec::new();
    let mut valids: Vec<Array2<bool>> = Vec::new();
    let (mut l_gen, mut l_pro) = (0.0, 0.0);
    let mut partition = PartitionCounts::default();
    let mut mismatch = Vec::new();
    if cfg.uses_unlabeled() {
        let unlabeled = state.sampler.sample_unlabeled(&data.unlabeled, bs, &mut state.streams.unlabeled_sample);
        let mut pro_targets = Vec::with_capacity(bs);
        for i in 0..bs {
            let base = &unlabeled[i].image;
            let src = &unlabeled[(i + 1) % bs].image;
            let (strong, rec) = cfg.augment.strong_augment(base, src, &mut state.streams.unlabeled_aug)?;
            let weak_base = rec.apply_image(base);
            let weak_src = rec.apply_image(src);
            let teach = |p: &ModelParams| -> Result<ProbabilityMap, TensorError> {
                Ok(rec.mix_probabilities(
                    &forward(p, &weak_base, false)?.probabilities(),
                    &forward(p, &weak_src, false)?.probabilities(),
                ))
            };
            let gen_t = teach(&state.gen_teacher)?;
            let pro_t = if cfg.single_teacher { gen_t.clone() } else { teach(&state.pro_teacher)? };
            gen_unl.push(student_forward(&state.gen_student, &strong, ctr_gen, cfg, &mut state.streams.dropout)?);
            pro_unl.push(student_forward(&state.pro_student, &strong, ctr_pro, cfg, &mut state.streams.dropout)?);
            valids.push(rec.valid_mask(w, h));
            teacher_targets.push(gen_t);
            pro_targets.push(pro_t);
        }

        let pro_probs: Vec<ProbabilityMap> = pro_unl.iter().map(Forward::probabilities).collect();
        let gen_probs: Vec<ProbabilityMap> = gen_unl.iter().map(Forward::probabilities).collect();
        let tracker = &mut state.tracker;
        let prof = professional_step_targets_with(&pro_probs, &teacher_targets, Some(&valids), cfg.selection, |m| {
            tracker.observe(m)
        })?;
        partition = prof.partition_counts();
        mismatch = prof.scores.0.clone();
        let (lp, gp) = pool(
            pro_probs
                .iter()
                .zip(prof.step.targets.iter().zip(&prof.step.weights))
                .map(|(p, (t, wt))| weighted_ce_sum(p, t, wt, cfg.normalization))
                .collect(),
        );
        let general = general_step_targets(&pro_targets, Some(&valids));
        let (lg, gg) = pool(
            gen_probs
                .iter()
                .zip(general.targets.iter().zip(&general.weights))
                .map(|(p, (t, wt))| weighted_ce_sum(p, t, wt, cfg.normalization))
                .collect(),
        );
        l_pro = lp;
        l_gen = lg;
        g_pro.unlabeled_logits = gp.into_iter().map(|g| scaled(g, cfg.lambda_u)).collect();
        g_gen.unlabeled_logits = gg.into_iter().map(|g| scaled(g, cfg.lambda_u)).collect();
        g_pro.unlabeled_features = vec![None; bs];
        g_gen.unlabeled_features = vec![None; bs];
    }

    // (5) contrastive losses on sampled pixels
    let (mut l_ac, mut l_sim) = (0.0, 0.0);
    if ctr_on {
        let sigma = state.sigma.clone().expect("active implies matched");
        let mut per_class: Vec<Vec<PixelRef>> = vec![Vec::new(); c];
        for (i, (_, labels)) in lab_views.iter().enumerate() {
            for (pixel, &l) in labels.as_slice().iter().enumerate() {
                if l != IGNORE {
                    per_class[l as usize].push(PixelRef { split: Split::Labeled, image: i, pixel, class: l as usize });
                }
            }
        }
        for (i, (t, valid)) in teacher_targets.iter().zip(&valids).enumerate() {
            for (pixel, (probs, &ok)) in t.pixels().zip(valid.iter()).enumerate() {
                let class = argmax(probs);
                if ok && probs[class] > cfg.phi {
                    per_class[class].push(PixelRef { split: Split::Unlabeled, image: i, pixel, class });
                }
            }
        }
        let picks = sample_per_class(per_class, cfg.samples_per_class, &mut state.streams.contrastive);
        if ctr_gen {
            let (a, s) = contrastive_for_student(&picks, &gen_lab, &gen_unl, state, &sigma, cfg, &mut g_gen);
            l_ac += a;
            l_sim += s;
        }
        if ctr_pro {
            let (a, s) = contrastive_for_student(&picks, &pro_lab, &pro_unl, state, &sigma, cfg, &mut g_pro);
            l_ac += a;
            l_sim += s;
        }
    }

    // (6) one SGD step per student
    let losses = LossBreakdown {
        supervised: ls_gen + ls_pro,
        general: l_gen,
        professional: l_pro,
        anchor: l_ac,
        similarity: l_sim,
        total: cfg.lambda_s as f64 * (ls_gen + ls_pro)
            + cfg.lambda_u as f64 * (l_gen + l_pro)
            + cfg.lambda_ctr as f64 * (l_ac + l_sim),
    };
    let grad_gen = apply_backward(&state.gen_student, &gen_lab, &gen_unl, &g_gen);
    let grad_pro = apply_backward(&state.pro_student, &pro_lab, &pro_unl, &g_pro);
    let finite = losses.total.is_finite() && grad_gen.all_finite() && grad_pro.all_finite();

    let mut record = TelemetryRecord {
        step: state.iteration,
        lr,
        losses,
        skipped: !finite,
        partition,
        unlabeled_pixels: if cfg.uses_unlabeled() { bs * w * h } else { 0 },
        mismatch,
        bank_occupancy: Vec::new(),
        contrastive_active: ctr_on,
        sigma: None,
    };

    if finite {
        state.gen_opt.step(&mut state.gen_student, &grad_gen, lr);
        state.pro_opt.step(&mut state.pro_student, &grad_pro, lr);
        state.consecutive_skips = 0;

        // (7) teachers follow their own students
        ema_update(&mut state.gen_teacher, &state.gen_student, cfg.ema_decay);
        ema_update(&mut state.pro_teacher, &state.pro_student, cfg.ema_decay);

        // (8) prototypes, assignment and memory bank
        if cfg.uses_contrastive() {
            maintain_contrastive_state(state, cfg, &teacher_lab, &lab_views);
        }
    } else {
        warn!("non-finite loss at iteration {}, step skipped", state.iteration);
        state.consecutive_skips += 1;
        state.total_skips += 1;
    }

    record.bank_occupancy = (0..c).map(|k| state.bank.len(k)).collect();
    record.sigma = state.sigma.as_ref().map(|s| s.as_slice().to_vec());
    state.iteration += 1;
    if state.consecutive_skips >= cfg.max_consecutive_skips {
        return Err(TrainError::NumericAbort(state.consecutive_skips, state.iteration));
    }
    Ok(record)
}

fn maintain_contrastive_state(
    state: &mut TrainState,
    cfg: &RunConfig,
    teacher_lab: &[Forward],
    lab_views: &[(crate::tensor::Image, LabelMap)],
) {
    let c = cfg.dataset.num_classes;
    let d = cfg.feature_dim;
    let mut sums = vec![vec![0.0f64; d]; c];
    let mut counts = vec![0usize; c];
    let mut feats = Vec::new();
    let mut confs = Vec::new();
    let mut labels = Vec::new();
    for (fwd, (_, lab)) in teacher_lab.iter().zip(lab_views) {
        let probs = fwd.probabilities();
        let p = probs.as_slice();
        for (pixel, &l) in lab.as_slice().iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let class = l as usize;
            let f = feature_row(fwd, pixel);
            let norm = f.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                sums[class].iter_mut().zip(f).for_each(|(s, x)| *s += *x as f64 / norm);
                counts[class] += 1;
            }
            feats.extend_from_slice(f);
            confs.push(p[pixel * c + class]);
            labels.push(class);
        }
    }
    let means: Vec<Option<Vec<f32>>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.iter().map(|v| (v / n as f64) as f32).collect()))
        .collect();
    state.prototypes.update(&means);

    let next = state.iteration + 1;
    let due = next >= cfg.warmup && (state.sigma.is_none() || (next - cfg.warmup).is_multiple_of(cfg.rematch_every));
    if due {
        match match_prototypes(&state.anchors, &state.prototypes) {
            Ok(sigma) => state.sigma = Some(sigma),
            Err(e) if state.sigma.is_none() => info!("anchor matching deferred: {e}"),
            Err(e) => warn!("anchor re-matching failed, keeping previous assignment: {e}"),
        }
    }
    if let Some(sigma) = &state.sigma {
        state.bank.proximity_guided_insert(&feats, &confs, &labels, &state.anchors, sigma, cfg.top_k);
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunSummary {
    #[serde(rename = "final")]
    pub final_report: EvalReport,
    pub best: EvalReport,
    pub skipped_steps: usize,
    pub anchors_max_cosine: f64,
}

/// Where `run` writes its artifacts.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn telemetry(&self) -> PathBuf {
        self.root.join("telemetry.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn best(&self) -> PathBuf {
        self.root.join("best")
    }
    pub fn final_ckpt(&self) -> PathBuf {
        self.root.join("final")
    }
    pub fn step_ckpt(&self, iteration: usize) -> PathBuf {
        self.root.join(format!("step_{iteration:06}"))
    }
}

/// Options of [`run`] that are not part of the experiment itself.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    /// Also checkpoint every this many iterations.
    pub checkpoint_every: Option<usize>,
    /// Stop (with a checkpoint) once this iteration is reached, before
    /// `max_iter`.
    pub stop_at: Option<usize>,
}

/// Full training with periodic evaluation of the Gen-Student.
pub fn run(cfg: &RunConfig, out_dir: &Path, opts: &RunOptions) -> Result<RunSummary, TrainError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let paths = RunPaths { root: out_dir.to_path_buf() };
    let data = generate_dataset(&cfg.dataset)?;
    let tail = cfg.tail();
    let (mut state, mut telemetry) = match &opts.resume {
        Some(dir) => (checkpoint::load(dir, cfg)?, TelemetryWriter::append_to(&paths.telemetry())?),
        None => (TrainState::new(cfg, &data)?, TelemetryWriter::create(&paths.telemetry())?),
    };
    info!(
        "anchors: max pairwise cosine {:.4}; starting at iteration {}",
        state.anchors.max_pairwise_cosine(),
        state.iteration
    );
    let end = opts.stop_at.map_or(cfg.max_iter, |s| s.min(cfg.max_iter));
    while state.iteration < end {
        let record = train_step(&mut state, cfg, &data)?;
        telemetry.log(&record)?;
        let it = state.iteration;
        if it % cfg.eval_every == 0 || it == cfg.max_iter {
            let report = evaluate(&state.gen_student, &data.val, &tail, it)?;
            info!("iteration {it}: mIoU {:.4}, tail {:?}", report.miou, report.tail_miou);
            if state.best.as_ref().is_none_or(|b| report.miou > b.miou) {
                state.best = Some(report.clone());
                checkpoint::save(&paths.best(), &state, cfg)?;
            }
        }
        if opts.checkpoint_every.is_some_and(|k| k > 0 && it % k == 0) {
            checkpoint::save(&paths.step_ckpt(it), &state, cfg)?;
        }
    }
    if state.iteration < cfg.max_iter {
        checkpoint::save(&paths.step_ckpt(state.iteration), &state, cfg)?;
    }
    let final_report = evaluate(&state.gen_student, &data.val, &tail, state.iteration)?;
    if state.best.is_none() {
        state.best = Some(final_report.clone());
    }
    checkpoint::save(&paths.final_ckpt(), &state, cfg)?;
    let summary = RunSummary {
        final_report,
        best: state.best.clone().expect("set above"),
        skipped_steps: state.total_skips,
        anchors_max_cosine: state.anchors.max_pairwise_cosine(),
    };
    std::fs::write(paths.report(), serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(summary)
}
