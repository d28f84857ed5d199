//! C ABI over the pseudo-label refinement, assignment and anchor routines.
//!
//! Every fallible call returns a [`StpgStatus`]. On failure a message is kept
//! per thread and can be read with [`stpg_last_error`]. Objects that outlive a
//! call are handed out as opaque pointers with a matching `_free` function.
//!
//! Dense buffers are row-major with the class axis last: a batch of
//! probability maps is `[batch][width][height][classes]`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ndarray::{Array2, Array3};
use stpg::anchors::hungarian::solve_lexicographic;
use stpg::anchors::{fit_anchors, match_prototypes, AnchorSet, PrototypeBank};
use stpg::rng::Rng;
use stpg::selection::{mismatch_scores, professional_step_targets, ConfusionMatrix, ProfessionalTargets, SelectionMode};
use stpg::tensor::ProbabilityMap;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StpgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// A caller buffer has the wrong length.
    BufferSize = 3,
    Panic = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StpgSelectionMode {
    ConsOnly = 0,
    ConsLmis = 1,
    ConsHmis = 2,
    All = 3,
}

impl From<StpgSelectionMode> for SelectionMode {
    fn from(m: StpgSelectionMode) -> Self {
        match m {
            StpgSelectionMode::ConsOnly => SelectionMode::ConsOnly,
            StpgSelectionMode::ConsLmis => SelectionMode::ConsLmis,
            StpgSelectionMode::ConsHmis => SelectionMode::ConsHmis,
            StpgSelectionMode::All => SelectionMode::All,
        }
    }
}

/// Which one-hot map to copy out of a refinement.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StpgPart {
    Cons = 0,
    Hmis = 1,
    Lmis = 2,
    /// The parts chosen by the selection mode.
    Targets = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StpgPartitionCounts {
    pub cons: usize,
    pub hmis: usize,
    pub lmis: usize,
}

/// Unit-norm class anchors.
pub struct StpgAnchors {
    set: AnchorSet,
    converged: bool,
}

/// Refined pseudo-labels for one batch.
pub struct StpgRefinement {
    targets: ProfessionalTargets,
    width: usize,
    height: usize,
    classes: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(StpgStatus, String);

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure(StpgStatus::InvalidArgument, msg.into())
    }
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> StpgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => StpgStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            StpgStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(StpgStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn check_len(name: &str, got: usize, want: usize) -> Result<(), Failure> {
    if got != want {
        return Err(Failure(StpgStatus::BufferSize, format!("{name}: length {got}, expected {want}")));
    }
    Ok(())
}

fn area(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Failure::invalid("dimensions overflow"))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn stpg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null after a
/// successful call. The pointer stays valid until the next call into this
/// library from the same thread.
#[no_mangle]
pub extern "C" fn stpg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Per-class mismatch scores of a `classes x classes` confusion matrix whose
/// rows are Pro predictions and columns Gen predictions.
///
/// # Safety
/// `counts` must point to `classes * classes` readable values and `out` to
/// `classes` writable values.
#[no_mangle]
pub unsafe extern "C" fn stpg_mismatch_scores(counts: *const u64, classes: usize, out: *mut f64) -> StpgStatus {
    guard(|| {
        non_null(counts, "counts")?;
        non_null(out, "out")?;
        if classes == 0 {
            return Err(Failure::invalid("classes must be positive"));
        }
        let n = area(&[classes, classes])?;
        let counts = std::slice::from_raw_parts(counts, n).to_vec();
        let scores = mismatch_scores(&ConfusionMatrix::from_counts(classes, counts));
        std::slice::from_raw_parts_mut(out, classes).copy_from_slice(&scores.0);
        Ok(())
    })
}

/// Minimum-cost assignment of an `n x n` row-major cost matrix. Row `i` is
/// assigned column `out[i]`; among optimal assignments the lexicographically
/// smallest is returned.
///
/// # Safety
/// `cost` must point to `n * n` readable values and `out` to `n` writable
/// values.
#[no_mangle]
pub unsafe extern "C" fn stpg_hungarian(cost: *const f64, n: usize, out: *mut usize) -> StpgStatus {
    guard(|| {
        non_null(cost, "cost")?;
        non_null(out, "out")?;
        let cost = std::slice::from_raw_parts(cost, area(&[n, n])?);
        if cost.iter().any(|c| !c.is_finite()) {
            return Err(Failure::invalid("cost matrix has non-finite entries"));
        }
        let sigma = solve_lexicographic(cost, n);
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&sigma);
        Ok(())
    })
}

/// Fits `classes` anchors in `dim` dimensions. The result is written to
/// `*out` and must be released with [`stpg_anchors_free`].
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn stpg_anchors_fit(
    classes: usize,
    dim: usize,
    tau: f32,
    seed: u64,
    out: *mut *mut StpgAnchors,
) -> StpgStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let fit = fit_anchors(classes, dim, tau, &mut Rng::new(seed)).map_err(|e| Failure::invalid(e.to_string()))?;
        *out = Box::into_raw(Box::new(StpgAnchors { set: fit.anchors, converged: fit.converged }));
        Ok(())
    })
}

/// # Safety
/// `anchors` must be null or a live handle from [`stpg_anchors_fit`].
#[no_mangle]
pub unsafe extern "C" fn stpg_anchors_classes(anchors: *const StpgAnchors) -> usize {
    anchors.as_ref().map_or(0, |a| a.set.classes())
}

/// # Safety
/// `anchors` must be null or a live handle from [`stpg_anchors_fit`].
#[no_mangle]
pub unsafe extern "C" fn stpg_anchors_dim(anchors: *const StpgAnchors) -> usize {
    anchors.as_ref().map_or(0, |a| a.set.dim())
}

/// Whether the fit met its tolerance before the step budget ran out.
///
/// # Safety
/// `anchors` must be null or a live handle from [`stpg_anchors_fit`].
#[no_mangle]
pub unsafe extern "C" fn stpg_anchors_converged(anchors: *const StpgAnchors) -> bool {
    anchors.as_ref().is_some_and(|a| a.converged)
}

/// Largest cosine between two distinct anchors; NaN for a null handle.
///
/// # Safety
/// `anchors` must be null or a live handle from [`stpg_anchors_fit`].
#[no_mangle]
pub unsafe extern "C" fn stpg_anchors_max_cosine(anchors: *const StpgAnchors) -> f64 {
    anchors.as_ref().map_or(f64::NAN, |a| a.set.max_pairwise_cosine())
}

/// Copies the `classes x dim` anchor matrix into `out`.
///
/// # Safety
/// `anchors` must be a live handle and `out` must point to `len` writable
/// values.
#[no_mangle]
pub unsafe extern "C" fn stpg_anchors_copy(anchors: *const StpgAnchors, out: *mut f32, len: usize) -> StpgStatus {
    guard(|| {
        non_null(anchors, "anchors")?;
        non_null(out, "out")?;
        let v = (*anchors).set.vectors();
        check_len("out", len, v.len())?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(v.as_slice().expect("contiguous anchors"));
        Ok(())
    })
}

/// Matches class prototypes (`classes x dim`, row-major) to anchors by
/// minimum total Euclidean distance. Class `k` gets anchor `sigma_out[k]`.
///
/// # Safety
/// `anchors` must be a live handle, `prototypes` must point to `len` readable
/// values and `sigma_out` to `classes` writable values.
#[no_mangle]
pub unsafe extern "C" fn stpg_anchors_match(
    anchors: *const StpgAnchors,
    prototypes: *const f32,
    len: usize,
    sigma_out: *mut usize,
) -> StpgStatus {
    guard(|| {
        non_null(anchors, "anchors")?;
        non_null(prototypes, "prototypes")?;
        non_null(sigma_out, "sigma_out")?;
        let set = &(*anchors).set;
        let (c, d) = (set.classes(), set.dim());
        check_len("prototypes", len, c * d)?;
        let protos = Array2::from_shape_vec((c, d), std::slice::from_raw_parts(prototypes, len).to_vec())
            .expect("length checked");
        if protos.iter().any(|v| !v.is_finite()) {
            return Err(Failure::invalid("prototypes have non-finite entries"));
        }
        let bank = PrototypeBank::from_parts(protos, vec![true; c], 0.0).map_err(|e| Failure::invalid(e.to_string()))?;
        let sigma = match_prototypes(set, &bank).map_err(|e| Failure::invalid(e.to_string()))?;
        std::slice::from_raw_parts_mut(sigma_out, c).copy_from_slice(sigma.as_slice());
        Ok(())
    })
}

/// # Safety
/// `anchors` must be null or a handle from [`stpg_anchors_fit`] that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn stpg_anchors_free(anchors: *mut StpgAnchors) {
    if !anchors.is_null() {
        drop(Box::from_raw(anchors));
    }
}

/// Splits Gen-Teacher pseudo-labels into consistent, high-mismatch and
/// low-mismatch parts against Pro-Student predictions, using one confusion
/// matrix over the whole batch, and selects the parts given by `mode`.
/// Each pixel's class probabilities must be finite, non-negative and sum to
/// one.
///
/// # Safety
/// `pro` and `gen` must each point to `batch * width * height * classes`
/// readable values and `out` to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn stpg_refine_labels(
    pro: *const f32,
    gen: *const f32,
    batch: usize,
    width: usize,
    height: usize,
    classes: usize,
    mode: StpgSelectionMode,
    out: *mut *mut StpgRefinement,
) -> StpgStatus {
    guard(|| {
        non_null(pro, "pro")?;
        non_null(gen, "gen")?;
        non_null(out, "out")?;
        *out = ptr::null_mut();
        if batch == 0 || width == 0 || height == 0 || classes == 0 {
            return Err(Failure::invalid("all dimensions must be positive"));
        }
        let per = area(&[width, height, classes])?;
        let total = area(&[batch, per])?;
        let maps = |data: &[f32], name: &str| -> Result<Vec<ProbabilityMap>, Failure> {
            data.chunks(per)
                .enumerate()
                .map(|(i, chunk)| {
                    let a = Array3::from_shape_vec((width, height, classes), chunk.to_vec()).expect("length checked");
                    ProbabilityMap::new(a).map_err(|e| Failure::invalid(format!("{name}[{i}]: {e}")))
                })
                .collect()
        };
        let pro = maps(std::slice::from_raw_parts(pro, total), "pro")?;
        let gen = maps(std::slice::from_raw_parts(gen, total), "gen")?;
        let targets =
            professional_step_targets(&pro, &gen, None, mode.into()).map_err(|e| Failure::invalid(e.to_string()))?;
        *out = Box::into_raw(Box::new(StpgRefinement { targets, width, height, classes }));
        Ok(())
    })
}

/// # Safety
/// `refinement` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn stpg_refinement_counts(
    refinement: *const StpgRefinement,
    out: *mut StpgPartitionCounts,
) -> StpgStatus {
    guard(|| {
        non_null(refinement, "refinement")?;
        non_null(out, "out")?;
        let c = (*refinement).targets.partition_counts();
        *out = StpgPartitionCounts { cons: c.cons, hmis: c.hmis, lmis: c.lmis };
        Ok(())
    })
}

/// Copies the `classes` mismatch scores used for the split.
///
/// # Safety
/// `refinement` must be a live handle and `out` must point to `len` writable
/// values.
#[no_mangle]
pub unsafe extern "C" fn stpg_refinement_scores(
    refinement: *const StpgRefinement,
    out: *mut f64,
    len: usize,
) -> StpgStatus {
    guard(|| {
        non_null(refinement, "refinement")?;
        non_null(out, "out")?;
        let s = &(*refinement).targets.scores.0;
        check_len("out", len, s.len())?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(s);
        Ok(())
    })
}

/// Copies the `classes x classes` batch confusion matrix.
///
/// # Safety
/// `refinement` must be a live handle and `out` must point to `len` writable
/// values.
#[no_mangle]
pub unsafe extern "C" fn stpg_refinement_confusion(
    refinement: *const StpgRefinement,
    out: *mut u64,
    len: usize,
) -> StpgStatus {
    guard(|| {
        non_null(refinement, "refinement")?;
        non_null(out, "out")?;
        let m = (*refinement).targets.confusion.counts();
        check_len("out", len, m.len())?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(m);
        Ok(())
    })
}

/// Copies one part as one-hot bytes, `[batch][width][height][classes]`.
///
/// # Safety
/// `refinement` must be a live handle and `out` must point to `len` writable
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn stpg_refinement_part(
    refinement: *const StpgRefinement,
    part: StpgPart,
    out: *mut u8,
    len: usize,
) -> StpgStatus {
    guard(|| {
        non_null(refinement, "refinement")?;
        non_null(out, "out")?;
        let r = &*refinement;
        let t = &r.targets;
        let per = r.width * r.height * r.classes;
        check_len("out", len, per * t.partitions.len())?;
        let out = std::slice::from_raw_parts_mut(out, len);
        for (i, dst) in out.chunks_mut(per).enumerate() {
            let map = match part {
                StpgPart::Cons => &t.partitions[i].cons,
                StpgPart::Hmis => &t.partitions[i].hmis,
                StpgPart::Lmis => &t.partitions[i].lmis,
                StpgPart::Targets => &t.step.targets[i],
            };
            dst.copy_from_slice(map.as_slice());
        }
        Ok(())
    })
}

/// Copies the per-pixel confidence weights, `[batch][width][height]`. Pixels
/// outside the selected parts have weight zero.
///
/// # Safety
/// `refinement` must be a live handle and `out` must point to `len` writable
/// values.
#[no_mangle]
pub unsafe extern "C" fn stpg_refinement_weights(
    refinement: *const StpgRefinement,
    out: *mut f32,
    len: usize,
) -> StpgStatus {
    guard(|| {
        non_null(refinement, "refinement")?;
        non_null(out, "out")?;
        let r = &*refinement;
        let per = r.width * r.height;
        check_len("out", len, per * r.targets.step.weights.len())?;
        let out = std::slice::from_raw_parts_mut(out, len);
        for (dst, w) in out.chunks_mut(per).zip(&r.targets.step.weights) {
            dst.copy_from_slice(w.as_slice());
        }
        Ok(())
    })
}

/// # Safety
/// `refinement` must be null or a handle from [`stpg_refine_labels`] that
/// has not been freed.
#[no_mangle]
pub unsafe extern "C" fn stpg_refinement_free(refinement: *mut StpgRefinement) {
    if !refinement.is_null() {
        drop(Box::from_raw(refinement));
    }
}
