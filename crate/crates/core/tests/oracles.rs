mod common;

use common::*;
use proptest::prelude::*;
use stpg::anchors::hungarian::{assignment_cost, solve, solve_lexicographic};
use stpg::anchors::{fit_anchors, match_prototypes, PrototypeBank};
use stpg::metrics::{mean_defined, EvalConfusion};
use stpg::rng::Rng;
use stpg::selection::{
    build_confusion, mismatch_scores, partition_pseudo_labels, ConfusionMatrix, PseudoLabelPartition,
};
use stpg::tensor::LabelMap;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mismatch_matches_loop_oracle(c in 1usize..8, seed in any::<u64>(), sparsity in 0usize..4) {
        let mut rng = Rng::new(seed);
        let counts: Vec<u64> = (0..c * c)
            .map(|_| if rng.below(4) < sparsity { 0 } else { rng.below(1000) as u64 })
            .collect();
        let got = mismatch_scores(&ConfusionMatrix::from_counts(c, counts.clone()));
        let want = mismatch_oracle(&counts, c);
        for (g, w) in got.0.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(g));
        }
    }

    #[test]
    fn partition_law(seed in any::<u64>(), c in 2usize..7, w in 1usize..9, h in 1usize..9) {
        let mut rng = Rng::new(seed);
        let pro = random_prob_map(&mut rng, w, h, c);
        let gen = random_prob_map(&mut rng, w, h, c);
        let scores = mismatch_scores(&build_confusion(&pro.argmax(), &gen.argmax(), c));
        let part = partition_pseudo_labels(&pro, &gen, &scores).unwrap();
        check_partition(&part, &gen.argmax(), c)?;
    }
}

fn check_partition(part: &PseudoLabelPartition, gen: &LabelMap, c: usize) -> Result<(), TestCaseError> {
    let sum = part.cons.data() + part.hmis.data() + part.lmis.data();
    for (pixel, &q) in gen.as_slice().iter().enumerate() {
        for k in 0..c {
            let expect = u8::from(k == q as usize);
            prop_assert_eq!(sum.as_slice().unwrap()[pixel * c + k], expect);
        }
    }
    Ok(())
}

#[test]
fn worked_mismatch_example() {
    let s = mismatch_scores(&ConfusionMatrix::from_counts(2, vec![8, 2, 1, 9]));
    assert!((s.0[0] - (0.2 + 1.0 / 9.0)).abs() < 1e-12);
    assert!((s.0[1] - (0.1 + 2.0 / 11.0)).abs() < 1e-12);
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = Rng::new(11);
    for n in 2..=7 {
        for trial in 0..1000 {
            let cost: Vec<f64> = if trial % 2 == 0 {
                (0..n * n).map(|_| rng.below(5) as f64).collect()
            } else {
                (0..n * n).map(|_| rng.uniform_range(-3.0, 3.0)).collect()
            };
            let a = solve(&cost, n);
            assert_eq!(assignment_cost(&cost, n, &a), brute_force_min_cost(&cost, n), "n {n} trial {trial}");
            let lex = solve_lexicographic(&cost, n);
            assert_eq!(assignment_cost(&cost, n, &lex), brute_force_min_cost(&cost, n));
        }
    }
}

#[test]
fn lexicographic_tie_break_is_smallest_optimum() {
    let mut rng = Rng::new(12);
    for _ in 0..300 {
        let n = 2 + rng.below(4);
        let cost: Vec<f64> = (0..n * n).map(|_| rng.below(3) as f64).collect();
        let best = brute_force_min_cost(&cost, n);
        let mut first: Option<Vec<usize>> = None;
        for_each_permutation(n, |p| {
            let s: f64 = p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            if s == best && first.as_ref().is_none_or(|f| p < f.as_slice()) {
                first = Some(p.to_vec());
            }
        });
        assert_eq!(solve_lexicographic(&cost, n), first.unwrap());
    }
}

#[test]
fn matched_cost_never_exceeds_identity_or_random() {
    let mut rng = Rng::new(13);
    for _ in 0..50 {
        let c = 2 + rng.below(6);
        let anchors = fit_anchors(c, 8, 0.5, &mut rng).unwrap().anchors;
        let mut protos = PrototypeBank::new(c, 8, 0.99);
        let means: Vec<Option<Vec<f32>>> =
            (0..c).map(|_| Some((0..8).map(|_| rng.normal() as f32).collect())).collect();
        protos.update(&means);
        let sigma = match_prototypes(&anchors, &protos).unwrap();
        let cost: Vec<f64> = (0..c)
            .flat_map(|k| {
                let p = protos.row(k);
                let anchors = &anchors;
                (0..c).map(move |j| {
                    anchors.row(j).iter().zip(&p).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt()
                })
            })
            .collect();
        let matched = assignment_cost(&cost, c, sigma.as_slice());
        let identity: Vec<usize> = (0..c).collect();
        assert!(matched <= assignment_cost(&cost, c, &identity) + 1e-9);
        for _ in 0..100 {
            let mut perm = identity.clone();
            rng.shuffle(&mut perm);
            assert!(matched <= assignment_cost(&cost, c, &perm) + 1e-9);
        }
    }
}

#[test]
fn anchors_are_evenly_spread_across_seeds() {
    for seed in 0..20 {
        let three = fit_anchors(3, 8, 0.5, &mut Rng::new(seed)).unwrap().anchors;
        for i in 0..3 {
            for j in i + 1..3 {
                assert!((three.cosine(i, j) + 0.5).abs() < 0.02, "seed {seed}: {}", three.cosine(i, j));
            }
        }
        let two = fit_anchors(2, 8, 0.5, &mut Rng::new(seed)).unwrap().anchors;
        assert!((two.cosine(0, 1) + 1.0).abs() < 1e-3);
        let six = fit_anchors(6, 16, 0.5, &mut Rng::new(seed)).unwrap();
        assert!(six.converged);
        assert!(six.anchors.max_pairwise_cosine() < 0.0);
    }
}

#[test]
fn memory_bank_contract() {
    for seed in 0..3 {
        bank_contract_run(seed, 10_000).unwrap();
    }
}

#[test]
fn iou_matches_set_oracle() {
    let mut rng = Rng::new(21);
    for _ in 0..100 {
        let c = 2 + rng.below(5);
        let (w, h) = (1 + rng.below(9), 1 + rng.below(9));
        let truth = random_labels(&mut rng, w, h, c);
        let pred = random_labels(&mut rng, w, h, c);
        let mut m = EvalConfusion::new(c);
        m.add(&truth, &pred);
        assert_eq!(m.iou(), iou_oracle(truth.as_slice(), pred.as_slice(), c));
    }
}

#[test]
fn miou_invariant_under_relabeling() {
    let mut rng = Rng::new(22);
    for _ in 0..100 {
        let c = 2 + rng.below(5);
        let truth = random_labels(&mut rng, 6, 5, c);
        let pred = random_labels(&mut rng, 6, 5, c);
        let mut perm: Vec<u8> = (0..c as u8).collect();
        rng.shuffle(&mut perm);
        let relabel = |m: &LabelMap| LabelMap::new(m.data().mapv(|v| perm[v as usize]), c).unwrap();
        let mut a = EvalConfusion::new(c);
        a.add(&truth, &pred);
        let mut b = EvalConfusion::new(c);
        b.add(&relabel(&truth), &relabel(&pred));
        assert!((mean_defined(&a.iou()) - mean_defined(&b.iou())).abs() < 1e-12);
    }
}
