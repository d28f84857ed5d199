//! Finite-difference check of the training losses against a separate f64
//! re-implementation of the network and every loss term.

use ndarray::Array3;
use stpg::anchors::{
    anchor_contrastive_loss, fit_anchors, similarity_loss, AnchorSet, Assignment, MemoryBank,
};
use stpg::backbone::{backward, forward, Forward, ModelParams, ModelShape};
use stpg::loss::{pool, supervised_ce_sum, weighted_ce_sum, Normalization};
use stpg::rng::Rng;
use stpg::selection::{general_step_targets, professional_step_targets, SelectionMode};
use stpg::tensor::{Image, LabelMap, ProbabilityMap};

use super::{random_labels, random_prob_map};

pub const SIDE: usize = 4;
pub const CLASSES: usize = 3;
const CHANNELS: usize = 3;
const HIDDEN: usize = 6;
const DIM: usize = 4;
const EPS: f64 = 1e-3;

pub const LAMBDA_S: f64 = 1.0;
pub const LAMBDA_U: f64 = 0.7;
pub const LAMBDA_CTR: f64 = 0.3;

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Term {
    Supervised,
    Professional,
    General,
    Anchor,
    Similarity,
    Total,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Supervised,
        Term::Professional,
        Term::General,
        Term::Anchor,
        Term::Similarity,
        Term::Total,
    ];

    /// Weights on (supervised, professional, general, anchor, similarity).
    fn weights(self) -> [f64; 5] {
        match self {
            Term::Supervised => [1.0, 0.0, 0.0, 0.0, 0.0],
            Term::Professional => [0.0, 1.0, 0.0, 0.0, 0.0],
            Term::General => [0.0, 0.0, 1.0, 0.0, 0.0],
            Term::Anchor => [0.0, 0.0, 0.0, 1.0, 0.0],
            Term::Similarity => [0.0, 0.0, 0.0, 0.0, 1.0],
            Term::Total => [LAMBDA_S, LAMBDA_U, LAMBDA_U, LAMBDA_CTR, LAMBDA_CTR],
        }
    }
}

#[derive(Clone, Copy)]
enum Split {
    Labeled,
    Unlabeled,
}

struct Pick {
    split: Split,
    image: usize,
    pixel: usize,
    class: usize,
}

pub struct Instance {
    shape: ModelShape,
    gen: ModelParams,
    pro: ModelParams,
    labeled: Vec<(Image, LabelMap)>,
    unlabeled: Vec<Image>,
    /// Professional targets and weights (Pro-Student), per unlabeled image.
    prof: Vec<(Vec<Option<usize>>, Vec<f32>)>,
    /// General targets and weights (Gen-Student).
    general: Vec<(Vec<Option<usize>>, Vec<f32>)>,
    anchors: AnchorSet,
    sigma: Assignment,
    bank: MemoryBank,
    picks: Vec<Pick>,
}

fn random_image(rng: &mut Rng, id: String) -> Image {
    Image::new(id, Array3::from_shape_fn((SIDE, SIDE, CHANNELS), |_| rng.normal() as f32)).unwrap()
}

fn random_model(rng: &mut Rng, shape: ModelShape) -> ModelParams {
    let mut p = ModelParams::init(shape, rng);
    for b in [&mut p.conv_b, &mut p.seg_b, &mut p.proj1_b, &mut p.proj2_b] {
        b.iter_mut().for_each(|v| *v = rng.uniform_range(-0.2, 0.5) as f32);
    }
    p
}

impl Instance {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let shape = ModelShape { in_channels: CHANNELS, hidden: HIDDEN, classes: CLASSES, feature_dim: DIM };
        let gen = random_model(&mut rng, shape);
        let pro = random_model(&mut rng, shape);
        let labeled: Vec<(Image, LabelMap)> = (0..2)
            .map(|i| (random_image(&mut rng, format!("l{i}")), random_labels(&mut rng, SIDE, SIDE, CLASSES)))
            .collect();
        let unlabeled: Vec<Image> = (0..2).map(|i| random_image(&mut rng, format!("u{i}"))).collect();

        let pro_probs: Vec<ProbabilityMap> =
            unlabeled.iter().map(|u| forward(&pro, u, false).unwrap().probabilities()).collect();
        let gen_teacher: Vec<ProbabilityMap> =
            (0..2).map(|_| random_prob_map(&mut rng, SIDE, SIDE, CLASSES)).collect();
        let pro_teacher: Vec<ProbabilityMap> =
            (0..2).map(|_| random_prob_map(&mut rng, SIDE, SIDE, CLASSES)).collect();
        let prof = professional_step_targets(&pro_probs, &gen_teacher, None, SelectionMode::ConsHmis).unwrap();
        let general = general_step_targets(&pro_teacher, None);
        let unpack = |t: &stpg::selection::StepTargets| -> Vec<(Vec<Option<usize>>, Vec<f32>)> {
            t.targets
                .iter()
                .zip(&t.weights)
                .map(|(o, w)| (o.classes_per_pixel().collect(), w.as_slice().to_vec()))
                .collect()
        };

        let anchors = fit_anchors(CLASSES, DIM, 0.5, &mut rng).unwrap().anchors;
        let mut perm: Vec<usize> = (0..CLASSES).collect();
        rng.shuffle(&mut perm);
        let sigma = Assignment::new(perm).unwrap();
        let mut bank = MemoryBank::new(CLASSES, DIM, 8, 0.5);
        for _ in 0..12 {
            let f: Vec<f32> = (0..DIM).map(|_| rng.normal() as f32).collect();
            bank.push(rng.below(CLASSES), &f, 0.9);
        }
        let n = SIDE * SIDE;
        let mut picks = Vec::new();
        for image in 0..2 {
            for _ in 0..4 {
                let pixel = rng.below(n);
                let class = labeled[image].1.as_slice()[pixel] as usize;
                picks.push(Pick { split: Split::Labeled, image, pixel, class });
            }
            for _ in 0..3 {
                picks.push(Pick { split: Split::Unlabeled, image, pixel: rng.below(n), class: rng.below(CLASSES) });
            }
        }
        Self {
            shape,
            gen,
            pro,
            labeled,
            unlabeled,
            prof: unpack(&prof.step),
            general: unpack(&general),
            anchors,
            sigma,
            bank,
            picks,
        }
    }

    /// Gradient of `term` with respect to (Gen-Student, Pro-Student) through
    /// the library's forward, loss and backward code.
    pub fn analytic(&self, term: Term) -> (Vec<f32>, Vec<f32>) {
        let [ws, wp, wg, wa, wsim] = term.weights().map(|w| w as f32);
        let grads = |params: &ModelParams, targets: &[(Vec<Option<usize>>, Vec<f32>)], wu: f32| {
            let lab: Vec<Forward> = self.labeled.iter().map(|(i, _)| forward(params, i, true).unwrap()).collect();
            let unl: Vec<Forward> = self.unlabeled.iter().map(|i| forward(params, i, true).unwrap()).collect();
            let (_, gs) =
                pool(lab.iter().zip(&self.labeled).map(|(f, (_, l))| supervised_ce_sum(&f.probabilities(), l)).collect());
            let (_, gu) = pool(
                unl.iter()
                    .zip(targets)
                    .map(|(f, (t, w))| {
                        let onehot = stpg::tensor::OneHotMap::from_classes(SIDE, SIDE, CLASSES, t.iter().copied());
                        let wm = stpg::tensor::WeightMap::new(
                            ndarray::Array2::from_shape_vec((SIDE, SIDE), w.clone()).unwrap(),
                        )
                        .unwrap();
                        weighted_ce_sum(&f.probabilities(), &onehot, &wm, Normalization::AllPixels)
                    })
                    .collect(),
            );
            let n = SIDE * SIDE;
            let mut feat_lab = vec![vec![0.0f32; n * DIM]; 2];
            let mut feat_unl = vec![vec![0.0f32; n * DIM]; 2];
            let inv = 1.0 / self.picks.len() as f32;
            for p in &self.picks {
                let (fwd, buf) = match p.split {
                    Split::Labeled => (&lab[p.image], &mut feat_lab[p.image]),
                    Split::Unlabeled => (&unl[p.image], &mut feat_unl[p.image]),
                };
                let f = &fwd.features.as_ref().unwrap().as_slice().unwrap()[p.pixel * DIM..(p.pixel + 1) * DIM];
                let (_, ga) = anchor_contrastive_loss(f, p.class, &self.anchors, &self.sigma);
                let (_, gsim) = similarity_loss(f, p.class, &self.bank);
                for k in 0..DIM {
                    buf[p.pixel * DIM + k] += inv * (wa * ga[k] + wsim * gsim[k]);
                }
            }
            let mut acc = ModelParams::zeros(self.shape);
            for (i, f) in lab.iter().enumerate() {
                let dl: Vec<f32> = gs[i].iter().map(|g| g * ws).collect();
                backward(params, &f.cache, &dl, Some(&feat_lab[i]), &mut acc);
            }
            for (i, f) in unl.iter().enumerate() {
                let dl: Vec<f32> = gu[i].iter().map(|g| g * wu).collect();
                backward(params, &f.cache, &dl, Some(&feat_unl[i]), &mut acc);
            }
            acc.flatten()
        };
        (grads(&self.gen, &self.general, wg), grads(&self.pro, &self.prof, wp))
    }

    /// Relative error `|g - fd| / |fd|` over both students' parameters,
    /// skipping coordinates whose perturbation flips any ReLU.
    pub fn relative_error(&self, term: Term) -> (f64, usize) {
        let (ga, pa) = self.analytic(term);
        let analytic: Vec<f64> = ga.iter().chain(&pa).map(|&v| v as f64).collect();
        let gen: Vec<f64> = self.gen.flatten().iter().map(|&v| v as f64).collect();
        let pro: Vec<f64> = self.pro.flatten().iter().map(|&v| v as f64).collect();
        let ng = gen.len();
        let mut theta: Vec<f64> = gen.into_iter().chain(pro).collect();
        let (_, base_pattern) = self.oracle(&theta[..ng], &theta[ng..], term);
        let (mut diff, mut norm, mut skipped) = (0.0, 0.0, 0);
        for i in 0..theta.len() {
            let orig = theta[i];
            theta[i] = orig + EPS;
            let (lp, pp) = self.oracle(&theta[..ng], &theta[ng..], term);
            theta[i] = orig - EPS;
            let (lm, pm) = self.oracle(&theta[..ng], &theta[ng..], term);
            theta[i] = orig;
            if pp != base_pattern || pm != base_pattern {
                skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * EPS);
            diff += (fd - analytic[i]).powi(2);
            norm += fd * fd;
        }
        ((diff.sqrt()) / norm.sqrt().max(1e-12), skipped)
    }

    /// Loss `term` in f64 plus the sign pattern of every ReLU input.
    fn oracle(&self, gen: &[f64], pro: &[f64], term: Term) -> (f64, Vec<bool>) {
        let w = term.weights();
        let mut pattern = Vec::new();
        let mut total = 0.0;
        for (theta, targets, is_pro) in [(gen, &self.general, false), (pro, &self.prof, true)] {
            let net = Net64::new(theta, self.shape);
            let lab: Vec<(Vec<f64>, Vec<f64>)> =
                self.labeled.iter().map(|(img, _)| net.forward(img, &mut pattern)).collect();
            let unl: Vec<(Vec<f64>, Vec<f64>)> = self.unlabeled.iter().map(|img| net.forward(img, &mut pattern)).collect();

            let mut ls = 0.0;
            let mut count = 0.0;
            for ((logits, _), (_, labels)) in lab.iter().zip(&self.labeled) {
                for (px, &l) in labels.as_slice().iter().enumerate() {
                    ls -= log_softmax(&logits[px * CLASSES..(px + 1) * CLASSES])[l as usize];
                    count += 1.0;
                }
            }
            ls /= count;

            let mut lu = 0.0;
            for ((logits, _), (t, wts)) in unl.iter().zip(targets.iter()) {
                for px in 0..SIDE * SIDE {
                    if let Some(k) = t[px] {
                        lu -= wts[px] as f64 * log_softmax(&logits[px * CLASSES..(px + 1) * CLASSES])[k];
                    }
                }
            }
            lu /= (2 * SIDE * SIDE) as f64;

            let (mut la, mut lsim) = (0.0, 0.0);
            for p in &self.picks {
                let feats = match p.split {
                    Split::Labeled => &lab[p.image].1,
                    Split::Unlabeled => &unl[p.image].1,
                };
                let f = &feats[p.pixel * DIM..(p.pixel + 1) * DIM];
                let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                let u: Vec<f64> = f.iter().map(|v| v / norm).collect();
                let tau = self.anchors.tau() as f64;
                let logits: Vec<f64> = (0..CLASSES)
                    .map(|j| self.anchors.row(j).iter().zip(&u).map(|(a, b)| *a as f64 * b).sum::<f64>() / tau)
                    .collect();
                la -= log_softmax(&logits)[self.sigma.anchor_of(p.class)];
                let entries: Vec<f64> = self
                    .bank
                    .entries(p.class)
                    .map(|(e, _)| 1.0 - e.iter().zip(&u).map(|(a, b)| *a as f64 * b).sum::<f64>())
                    .collect();
                if !entries.is_empty() {
                    lsim += entries.iter().sum::<f64>() / entries.len() as f64;
                }
            }
            la /= self.picks.len() as f64;
            lsim /= self.picks.len() as f64;

            let lu_weight = if is_pro { w[1] } else { w[2] };
            total += w[0] * ls + lu_weight * lu + w[3] * la + w[4] * lsim;
        }
        (total, pattern)
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// The same architecture written plainly in f64.
struct Net64<'a> {
    conv_w: &'a [f64],
    conv_b: &'a [f64],
    seg_w: &'a [f64],
    seg_b: &'a [f64],
    p1_w: &'a [f64],
    p1_b: &'a [f64],
    p2_w: &'a [f64],
    p2_b: &'a [f64],
}

impl<'a> Net64<'a> {
    fn new(theta: &'a [f64], s: ModelShape) -> Self {
        let (f, hd, c, d) = (s.in_channels, s.hidden, s.classes, s.feature_dim);
        let sizes = [9 * f * hd, hd, hd * c, c, hd * hd, hd, hd * d, d];
        let mut parts = Vec::new();
        let mut rest = theta;
        for n in sizes {
            let (a, b) = rest.split_at(n);
            parts.push(a);
            rest = b;
        }
        assert!(rest.is_empty());
        Self {
            conv_w: parts[0],
            conv_b: parts[1],
            seg_w: parts[2],
            seg_b: parts[3],
            p1_w: parts[4],
            p1_b: parts[5],
            p2_w: parts[6],
            p2_b: parts[7],
        }
    }

    /// Logits `[P, C]` and features `[P, D]` with pixel `p = x * H + y`.
    fn forward(&self, img: &Image, pattern: &mut Vec<bool>) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = (img.width(), img.height());
        let x = img.data();
        let mut logits = Vec::new();
        let mut feats = Vec::new();
        for px in 0..w {
            for py in 0..h {
                let mut hidden = vec![0.0; HIDDEN];
                for (j, hv) in hidden.iter_mut().enumerate() {
                    let mut z = self.conv_b[j];
                    for dx in -1i64..=1 {
                        for dy in -1i64..=1 {
                            let (qx, qy) = (px as i64 + dx, py as i64 + dy);
                            if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                                continue;
                            }
                            let k = ((dx + 1) * 3 + (dy + 1)) as usize;
                            for ch in 0..CHANNELS {
                                z += x[[qx as usize, qy as usize, ch]] as f64 * self.conv_w[(k * CHANNELS + ch) * HIDDEN + j];
                            }
                        }
                    }
                    pattern.push(z > 0.0);
                    *hv = z.max(0.0);
                }
                for k in 0..CLASSES {
                    logits.push(self.seg_b[k] + (0..HIDDEN).map(|i| hidden[i] * self.seg_w[i * CLASSES + k]).sum::<f64>());
                }
                let a: Vec<f64> = (0..HIDDEN)
                    .map(|j| {
                        let z = self.p1_b[j] + (0..HIDDEN).map(|i| hidden[i] * self.p1_w[i * HIDDEN + j]).sum::<f64>();
                        pattern.push(z > 0.0);
                        z.max(0.0)
                    })
                    .collect();
                for k in 0..DIM {
                    feats.push(self.p2_b[k] + (0..HIDDEN).map(|i| a[i] * self.p2_w[i * DIM + k]).sum::<f64>());
                }
            }
        }
        (logits, feats)
    }
}
