#ifndef STPG_H
#define STPG_H

#pragma once

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StpgStatus {
  STPG_STATUS_OK = 0,
  STPG_STATUS_NULL_POINTER = 1,
  STPG_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A caller buffer has the wrong length.
   */
  STPG_STATUS_BUFFER_SIZE = 3,
  STPG_STATUS_PANIC = 4,
} StpgStatus;

typedef enum StpgSelectionMode {
  STPG_SELECTION_MODE_CONS_ONLY = 0,
  STPG_SELECTION_MODE_CONS_LMIS = 1,
  STPG_SELECTION_MODE_CONS_HMIS = 2,
  STPG_SELECTION_MODE_ALL = 3,
} StpgSelectionMode;

/**
 * Which one-hot map to copy out of a refinement.
 */
typedef enum StpgPart {
  STPG_PART_CONS = 0,
  STPG_PART_HMIS = 1,
  STPG_PART_LMIS = 2,
  /**
   * The parts chosen by the selection mode.
   */
  STPG_PART_TARGETS = 3,
} StpgPart;

/**
 * Unit-norm class anchors.
 */
typedef struct StpgAnchors StpgAnchors;

/**
 * Refined pseudo-labels for one batch.
 */
typedef struct StpgRefinement StpgRefinement;

typedef struct StpgPartitionCounts {
  size_t cons;
  size_t hmis;
  size_t lmis;
} StpgPartitionCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static version string.
 */
const char *stpg_version(void);

/**
 * Message for the last failed call on this thread, or null after a
 * successful call. The pointer stays valid until the next call into this
 * library from the same thread.
 */
const char *stpg_last_error(void);

/**
 * Per-class mismatch scores of a `classes x classes` confusion matrix whose
 * rows are Pro predictions and columns Gen predictions.
 *
 * # Safety
 * `counts` must point to `classes * classes` readable values and `out` to
 * `classes` writable values.
 */
enum StpgStatus stpg_mismatch_scores(const uint64_t *counts, size_t classes, double *out);

/**
 * Minimum-cost assignment of an `n x n` row-major cost matrix. Row `i` is
 * assigned column `out[i]`; among optimal assignments the lexicographically
 * smallest is returned.
 *
 * # Safety
 * `cost` must point to `n * n` readable values and `out` to `n` writable
 * values.
 */
enum StpgStatus stpg_hungarian(const double *cost, size_t n, size_t *out);

/**
 * Fits `classes` anchors in `dim` dimensions. The result is written to
 * `*out` and must be released with [`stpg_anchors_free`].
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one pointer.
 */
enum StpgStatus stpg_anchors_fit(size_t classes,
                                 size_t dim,
                                 float tau,
                                 uint64_t seed,
                                 struct StpgAnchors **out);

/**
 * # Safety
 * `anchors` must be null or a live handle from [`stpg_anchors_fit`].
 */
size_t stpg_anchors_classes(const struct StpgAnchors *anchors);

/**
 * # Safety
 * `anchors` must be null or a live handle from [`stpg_anchors_fit`].
 */
size_t stpg_anchors_dim(const struct StpgAnchors *anchors);

/**
 * Whether the fit met its tolerance before the step budget ran out.
 *
 * # Safety
 * `anchors` must be null or a live handle from [`stpg_anchors_fit`].
 */
bool stpg_anchors_converged(const struct StpgAnchors *anchors);

/**
 * Largest cosine between two distinct anchors; NaN for a null handle.
 *
 * # Safety
 * `anchors` must be null or a live handle from [`stpg_anchors_fit`].
 */
double stpg_anchors_max_cosine(const struct StpgAnchors *anchors);

/**
 * Copies the `classes x dim` anchor matrix into `out`.
 *
 * # Safety
 * `anchors` must be a live handle and `out` must point to `len` writable
 * values.
 */
enum StpgStatus stpg_anchors_copy(const struct StpgAnchors *anchors, float *out, size_t len);

/**
 * Matches class prototypes (`classes x dim`, row-major) to anchors by
 * minimum total Euclidean distance. Class `k` gets anchor `sigma_out[k]`.
 *
 * # Safety
 * `anchors` must be a live handle, `prototypes` must point to `len` readable
 * values and `sigma_out` to `classes` writable values.
 */
enum StpgStatus stpg_anchors_match(const struct StpgAnchors *anchors,
                                   const float *prototypes,
                                   size_t len,
                                   size_t *sigma_out);

/**
 * # Safety
 * `anchors` must be null or a handle from [`stpg_anchors_fit`] that has
 * not been freed.
 */
void stpg_anchors_free(struct StpgAnchors *anchors);

/**
 * Splits Gen-Teacher pseudo-labels into consistent, high-mismatch and
 * low-mismatch parts against Pro-Student predictions, using one confusion
 * matrix over the whole batch, and selects the parts given by `mode`.
 * Each pixel's class probabilities must be finite, non-negative and sum to
 * one.
 *
 * # Safety
 * `pro` and `gen` must each point to `batch * width * height * classes`
 * readable values and `out` to writable storage for one pointer.
 */
enum StpgStatus stpg_refine_labels(const float *pro,
                                   const float *gen,
                                   size_t batch,
                                   size_t width,
                                   size_t height,
                                   size_t classes,
                                   enum StpgSelectionMode mode,
                                   struct StpgRefinement **out);

/**
 * # Safety
 * `refinement` must be a live handle and `out` a writable pointer.
 */
enum StpgStatus stpg_refinement_counts(const struct StpgRefinement *refinement,
                                       struct StpgPartitionCounts *out);

/**
 * Copies the `classes` mismatch scores used for the split.
 *
 * # Safety
 * `refinement` must be a live handle and `out` must point to `len` writable
 * values.
 */
enum StpgStatus stpg_refinement_scores(const struct StpgRefinement *refinement,
                                       double *out,
                                       size_t len);

/**
 * Copies the `classes x classes` batch confusion matrix.
 *
 * # Safety
 * `refinement` must be a live handle and `out` must point to `len` writable
 * values.
 */
enum StpgStatus stpg_refinement_confusion(const struct StpgRefinement *refinement,
                                          uint64_t *out,
                                          size_t len);

/**
 * Copies one part as one-hot bytes, `[batch][width][height][classes]`.
 *
 * # Safety
 * `refinement` must be a live handle and `out` must point to `len` writable
 * bytes.
 */
enum StpgStatus stpg_refinement_part(const struct StpgRefinement *refinement,
                                     enum StpgPart part,
                                     uint8_t *out,
                                     size_t len);

/**
 * Copies the per-pixel confidence weights, `[batch][width][height]`. Pixels
 * outside the selected parts have weight zero.
 *
 * # Safety
 * `refinement` must be a live handle and `out` must point to `len` writable
 * values.
 */
enum StpgStatus stpg_refinement_weights(const struct StpgRefinement *refinement,
                                        float *out,
                                        size_t len);

/**
 * # Safety
 * `refinement` must be null or a handle from [`stpg_refine_labels`] that
 * has not been freed.
 */
void stpg_refinement_free(struct StpgRefinement *refinement);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STPG_H */
