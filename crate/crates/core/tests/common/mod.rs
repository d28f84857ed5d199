//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use ndarray::{Array2, Array3};
use stpg::rng::Rng;
use stpg::tensor::{LabelMap, ProbabilityMap};

/// Per-class mismatch score by explicit loops over the matrix.
pub fn mismatch_oracle(m: &[u64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c);
    for q in 0..c {
        let diag = m[q * c + q] as f64;
        let mut row = 0.0;
        let mut col = 0.0;
        for k in 0..c {
            row += m[q * c + k] as f64;
            col += m[k * c + q] as f64;
        }
        let a = if row == 0.0 { 0.0 } else { (row - diag) / row };
        let b = if col == 0.0 { 0.0 } else { (col - diag) / col };
        out.push(a + b);
    }
    out
}

fn permute(k: usize, items: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        visit(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(k + 1, items, visit);
        items.swap(k, i);
    }
}

/// Calls `visit` on every permutation of `0..n`.
pub fn for_each_permutation(n: usize, mut visit: impl FnMut(&[usize])) {
    let mut items: Vec<usize> = (0..n).collect();
    permute(0, &mut items, &mut visit);
}

/// Minimum assignment cost by exhaustive search.
pub fn brute_force_min_cost(cost: &[f64], n: usize) -> f64 {
    let mut best = f64::INFINITY;
    for_each_permutation(n, |p| {
        let s: f64 = p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        best = best.min(s);
    });
    best
}

/// Per-class IoU by set arithmetic over pixel index sets.
pub fn iou_oracle(truth: &[u8], pred: &[u8], c: usize) -> Vec<Option<f64>> {
    use std::collections::BTreeSet;
    (0..c as u8)
        .map(|k| {
            let t: BTreeSet<usize> = truth.iter().enumerate().filter(|(_, &v)| v == k).map(|(i, _)| i).collect();
            let p: BTreeSet<usize> = pred.iter().enumerate().filter(|(_, &v)| v == k).map(|(i, _)| i).collect();
            let union = t.union(&p).count();
            (union > 0).then(|| t.intersection(&p).count() as f64 / union as f64)
        })
        .collect()
}

pub fn random_prob_map(rng: &mut Rng, w: usize, h: usize, c: usize) -> ProbabilityMap {
    let data = Array3::from_shape_fn((w, h, c), |_| rng.uniform() as f32 + 1e-3);
    let mut data = data;
    for mut px in data.lanes_mut(ndarray::Axis(2)) {
        let s: f32 = px.sum();
        px.mapv_inplace(|v| v / s);
    }
    ProbabilityMap::new(data).unwrap()
}

pub fn random_labels(rng: &mut Rng, w: usize, h: usize, c: usize) -> LabelMap {
    LabelMap::new(Array2::from_shape_fn((w, h), |_| rng.below(c) as u8), c).unwrap()
}

/// Drives a memory bank through `ops` random single and proximity-guided
/// insertions, checking it against a shadow FIFO model after every step.
pub fn bank_contract_run(seed: u64, ops: usize) -> Result<(), String> {
    use std::collections::VecDeque;
    use stpg::anchors::{fit_anchors, Assignment, MemoryBank};

    const CAP: usize = 256;
    const PHI: f32 = 0.95;
    let (c, d) = (4, 6);
    let mut rng = Rng::new(seed);
    let anchors = fit_anchors(c, d, 0.5, &mut rng).unwrap().anchors;
    let sigma = Assignment::new(vec![2, 0, 3, 1]).unwrap();
    let mut bank = MemoryBank::new(c, d, CAP, PHI);
    let mut shadow: Vec<VecDeque<(Vec<f32>, f32)>> = vec![VecDeque::new(); c];
    let unit = |f: &[f32]| {
        let n = f.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        f.iter().map(|v| (*v as f64 / n) as f32).collect::<Vec<f32>>()
    };
    let confidence = |rng: &mut Rng| match rng.below(4) {
        0 => PHI,
        1 => rng.uniform_range(0.0, 0.95) as f32,
        _ => rng.uniform_range(0.9501, 1.0) as f32,
    };
    let admit = |shadow: &mut Vec<VecDeque<(Vec<f32>, f32)>>, class: usize, f: Vec<f32>, conf: f32| {
        if conf > PHI {
            shadow[class].push_back((f, conf));
            if shadow[class].len() > CAP {
                shadow[class].pop_front();
            }
        }
    };
    for op in 0..ops {
        if rng.below(3) == 0 {
            let n = 1 + rng.below(40);
            let k = 1 + rng.below(12);
            let feats: Vec<f32> = (0..n * d).map(|_| rng.normal() as f32).collect();
            let confs: Vec<f32> = (0..n).map(|_| confidence(&mut rng)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
            bank.proximity_guided_insert(&feats, &confs, &labels, &anchors, &sigma, k);
            for class in 0..c {
                let a = anchors.row(sigma.anchor_of(class));
                let mut cands: Vec<(f64, usize)> = (0..n)
                    .filter(|&i| labels[i] == class && confs[i] > PHI)
                    .map(|i| {
                        let u = unit(&feats[i * d..(i + 1) * d]);
                        let dist = u.iter().zip(a).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
                        (dist, i)
                    })
                    .collect();
                cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                for &(_, i) in cands.iter().take(k) {
                    admit(&mut shadow, class, unit(&feats[i * d..(i + 1) * d]), confs[i]);
                }
            }
        } else {
            let class = rng.below(c);
            let f: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
            let conf = confidence(&mut rng);
            let admitted = bank.push(class, &f, conf);
            if admitted != (conf > PHI) {
                return Err(format!("op {op}: admission of confidence {conf} was {admitted}"));
            }
            admit(&mut shadow, class, unit(&f), conf);
        }
        for class in 0..c {
            if bank.len(class) > CAP {
                return Err(format!("op {op}: class {class} holds {} > {CAP}", bank.len(class)));
            }
            if bank.len(class) != shadow[class].len() {
                return Err(format!("op {op}: class {class} length {} vs {}", bank.len(class), shadow[class].len()));
            }
            for ((f, conf), (sf, sc)) in bank.entries(class).zip(&shadow[class]) {
                if !(conf > PHI) {
                    return Err(format!("op {op}: stored confidence {conf}"));
                }
                if conf != *sc || f.iter().zip(sf).any(|(a, b)| (a - b).abs() > 1e-6) {
                    return Err(format!("op {op}: class {class} order differs from FIFO model"));
                }
            }
        }
    }
    Ok(())
}
