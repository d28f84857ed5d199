use std::ffi::CStr;
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use stpg::rng::Rng;
use stpg_ffi::*;

fn last_error() -> Option<String> {
    let p = stpg_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn random_probs(rng: &mut Rng, n: usize, c: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..n * c).map(|_| rng.uniform() as f32 + 0.01).collect();
    for px in v.chunks_mut(c) {
        let s: f32 = px.iter().sum();
        px.iter_mut().for_each(|x| *x /= s);
    }
    v
}

#[test]
fn mismatch_scores_through_the_c_abi() {
    let counts = [8u64, 2, 1, 9];
    let mut out = [0.0f64; 2];
    assert_eq!(unsafe { stpg_mismatch_scores(counts.as_ptr(), 2, out.as_mut_ptr()) }, StpgStatus::Ok);
    assert!((out[0] - (0.2 + 1.0 / 9.0)).abs() < 1e-12);
    assert!((out[1] - (0.1 + 2.0 / 11.0)).abs() < 1e-12);

    assert_eq!(unsafe { stpg_mismatch_scores(ptr::null(), 2, out.as_mut_ptr()) }, StpgStatus::NullPointer);
    assert!(last_error().unwrap().contains("counts"));
    assert_eq!(unsafe { stpg_mismatch_scores(counts.as_ptr(), 0, out.as_mut_ptr()) }, StpgStatus::InvalidArgument);
}

#[test]
fn hungarian_returns_smallest_optimal_assignment() {
    let cost = [0.0, 0.0, 0.0, 0.0];
    let mut sigma = [9usize; 2];
    assert_eq!(unsafe { stpg_hungarian(cost.as_ptr(), 2, sigma.as_mut_ptr()) }, StpgStatus::Ok);
    assert_eq!(sigma, [0, 1]);
    let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
    let mut sigma = [0usize; 3];
    assert_eq!(unsafe { stpg_hungarian(cost.as_ptr(), 3, sigma.as_mut_ptr()) }, StpgStatus::Ok);
    assert_eq!(sigma, [1, 0, 2]);
    let bad = [f64::NAN, 0.0, 0.0, 0.0];
    assert_eq!(unsafe { stpg_hungarian(bad.as_ptr(), 2, sigma.as_mut_ptr()) }, StpgStatus::InvalidArgument);
}

#[test]
fn anchor_handle_lifecycle() {
    let mut a = ptr::null_mut();
    assert_eq!(unsafe { stpg_anchors_fit(4, 6, 0.5, 3, &mut a) }, StpgStatus::Ok);
    assert!(last_error().is_none());
    unsafe {
        assert_eq!((stpg_anchors_classes(a), stpg_anchors_dim(a)), (4, 6));
        assert!(stpg_anchors_converged(a));
        assert!(stpg_anchors_max_cosine(a) < 0.0);
    }
    let mut v = vec![0.0f32; 24];
    assert_eq!(unsafe { stpg_anchors_copy(a, v.as_mut_ptr(), 23) }, StpgStatus::BufferSize);
    assert_eq!(unsafe { stpg_anchors_copy(a, v.as_mut_ptr(), 24) }, StpgStatus::Ok);
    for row in v.chunks(6) {
        let n: f32 = row.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }

    // prototypes sitting on a permutation of the anchors recover it
    let perm = [2usize, 0, 3, 1];
    let protos: Vec<f32> = perm.iter().flat_map(|&j| v[j * 6..(j + 1) * 6].iter().map(|x| x * 3.0)).collect();
    let mut sigma = [0usize; 4];
    assert_eq!(unsafe { stpg_anchors_match(a, protos.as_ptr(), protos.len(), sigma.as_mut_ptr()) }, StpgStatus::Ok);
    assert_eq!(sigma, perm);
    unsafe { stpg_anchors_free(a) };
    unsafe { stpg_anchors_free(ptr::null_mut()) };

    let mut a = ptr::null_mut();
    assert_eq!(unsafe { stpg_anchors_fit(1, 6, 0.5, 3, &mut a) }, StpgStatus::InvalidArgument);
    assert!(a.is_null());
    assert!(last_error().is_some());
}

#[test]
fn refinement_parts_cover_gen_labels() {
    let (b, w, h, c) = (3, 5, 4, 4);
    let mut rng = Rng::new(17);
    let pro = random_probs(&mut rng, b * w * h, c);
    let gen = random_probs(&mut rng, b * w * h, c);
    let mut r = ptr::null_mut();
    let status = unsafe { stpg_refine_labels(pro.as_ptr(), gen.as_ptr(), b, w, h, c, StpgSelectionMode::All, &mut r) };
    assert_eq!(status, StpgStatus::Ok, "{:?}", last_error());

    let part = |p: StpgPart| {
        let mut out = vec![0u8; b * w * h * c];
        assert_eq!(unsafe { stpg_refinement_part(r, p, out.as_mut_ptr(), out.len()) }, StpgStatus::Ok);
        out
    };
    let (cons, hmis, lmis, targets) = (part(StpgPart::Cons), part(StpgPart::Hmis), part(StpgPart::Lmis), part(StpgPart::Targets));
    for (px, g) in gen.chunks(c).enumerate() {
        let q = stpg::tensor::argmax(g);
        for k in 0..c {
            let i = px * c + k;
            assert_eq!(cons[i] + hmis[i] + lmis[i], u8::from(k == q));
            assert_eq!(targets[i], u8::from(k == q));
        }
    }

    let mut counts = StpgPartitionCounts::default();
    assert_eq!(unsafe { stpg_refinement_counts(r, &mut counts) }, StpgStatus::Ok);
    assert_eq!(counts.cons + counts.hmis + counts.lmis, b * w * h);
    let mut confusion = vec![0u64; c * c];
    assert_eq!(unsafe { stpg_refinement_confusion(r, confusion.as_mut_ptr(), confusion.len()) }, StpgStatus::Ok);
    assert_eq!(confusion.iter().sum::<u64>(), (b * w * h) as u64);
    let mut scores = vec![0.0; c];
    let mut expect = vec![0.0; c];
    unsafe {
        assert_eq!(stpg_refinement_scores(r, scores.as_mut_ptr(), c), StpgStatus::Ok);
        assert_eq!(stpg_mismatch_scores(confusion.as_ptr(), c, expect.as_mut_ptr()), StpgStatus::Ok);
    }
    assert_eq!(scores, expect);
    let mut weights = vec![0.0f32; b * w * h];
    assert_eq!(unsafe { stpg_refinement_weights(r, weights.as_mut_ptr(), weights.len()) }, StpgStatus::Ok);
    for (wt, g) in weights.iter().zip(gen.chunks(c)) {
        assert_eq!(*wt, g.iter().cloned().fold(f32::MIN, f32::max));
    }
    unsafe { stpg_refinement_free(r) };
}

#[test]
fn refinement_rejects_bad_probabilities() {
    let pro = [0.5f32, 0.6];
    let gen = [0.5f32, 0.5];
    let mut r = ptr::null_mut();
    let status = unsafe { stpg_refine_labels(pro.as_ptr(), gen.as_ptr(), 1, 1, 1, 2, StpgSelectionMode::ConsHmis, &mut r) };
    assert_eq!(status, StpgStatus::InvalidArgument);
    assert!(r.is_null());
    assert!(last_error().unwrap().starts_with("pro[0]"));
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn generated_header_compiles_and_links_from_c() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/stpg.h")).unwrap();
    for name in ["stpg_refine_labels", "stpg_hungarian", "stpg_anchors_fit", "stpg_last_error", "StpgStatus"] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let lib = target_dir().join("libstpg_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let exe = tempfile_path("stpg_smoke");
    let status = Command::new(&cc)
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status();
    let status = match status {
        Ok(s) => s,
        Err(e) => {
            eprintln!("no C compiler ({cc}: {e}); header checked textually only");
            return;
        }
    };
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    let _ = std::fs::remove_file(&exe);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}

fn tempfile_path(stem: &str) -> PathBuf {
    std::env::temp_dir().join(format!("{stem}-{}", std::process::id()))
}
