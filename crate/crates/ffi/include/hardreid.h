#ifndef HARDREID_H
#define HARDREID_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum HrStatus {
  HR_STATUS_OK = 0,
  HR_STATUS_NULL_POINTER = 1,
  HR_STATUS_CONFIG = 2,
  HR_STATUS_VALIDATION = 3,
  HR_STATUS_CONTRACT = 4,
  HR_STATUS_NUMERIC = 5,
  HR_STATUS_IO = 6,
  HR_STATUS_PARSE = 7,
  HR_STATUS_PANIC = 99,
} HrStatus;

/**
 * Loaded embedding network.
 */
typedef struct HrModel HrModel;

/**
 * Labels of one batch, each array of length `n`. Use -1 for unknown
 * clothing or viewpoint.
 */
typedef struct HrLabels {
  size_t n;
  const int64_t *identity;
  const int64_t *clothing;
  const int64_t *viewpoint;
} HrLabels;

typedef struct HrPlan {
  uint64_t n_hp;
  uint64_t n_hn;
  uint64_t tryon_per_identity;
  uint64_t tryon_total;
} HrPlan;

typedef struct HrPoseThresholds {
  double vis_min;
  double eps_y;
  double eps_v;
  double min_interocular;
} HrPoseThresholds;

typedef struct HrPoseVerdict {
  bool pass;
  double score;
  bool visible;
  bool eyes_level;
  bool eyes_apart;
  bool ears_symmetric;
} HrPoseVerdict;

/**
 * Metrics are NaN when no query had a valid match.
 */
typedef struct HrEvalMetrics {
  double rank1;
  double rank5;
  double rank10;
  double map;
  size_t queries_used;
  size_t queries_skipped;
} HrEvalMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *hr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hr_version(void);

/**
 * Fill the n×n hard-positive and hard-negative scale matrices
 * (1+alpha / 1-alpha on hard pairs, 1 elsewhere).
 *
 * # Safety
 * `labels` must describe valid arrays of length `n`; `out_hp_m` and
 * `out_hn_m` must have room for n*n doubles.
 */
enum HrStatus hr_analyze_batch(const struct HrLabels *labels,
                               bool viewpoint_hardness,
                               double alpha,
                               double *out_hp_m,
                               double *out_hn_m);

/**
 * Raw plus hardness-adjusted triplet loss on an n×dim feature batch, and
 * optionally its gradient w.r.t. the features.
 *
 * # Safety
 * `features` must hold n*dim doubles with n = `labels->n`; `out_loss` must be
 * valid; `out_grad` may be NULL or point to n*dim doubles.
 */
enum HrStatus hr_aggregated_triplet_loss(const struct HrLabels *labels,
                                         const double *features,
                                         size_t dim,
                                         bool viewpoint_hardness,
                                         double alpha,
                                         double margin,
                                         double adj_weight,
                                         int32_t mining,
                                         double eps,
                                         double *out_loss,
                                         double *out_grad);

/**
 * Closed-form hard-pair counts for C identities with per-identity image
 * counts `k[0..c]`, m library garments and n anchors per identity.
 *
 * # Safety
 * `k` must hold `c` values; `out` must be valid.
 */
enum HrStatus hr_plan_generation(uint64_t c,
                                 uint64_t m,
                                 uint64_t n,
                                 const int64_t *k,
                                 struct HrPlan *out);

/**
 * Variance of the 4-neighbour Laplacian response over interior pixels of a
 * row-major 8-bit grayscale image.
 *
 * # Safety
 * `pixels` must hold width*height bytes; `out` must be valid.
 */
enum HrStatus hr_laplacian_variance(size_t width,
                                    size_t height,
                                    const uint8_t *pixels,
                                    double *out);

/**
 * Default frontal-pose thresholds.
 */
struct HrPoseThresholds hr_pose_thresholds_default(void);

/**
 * Frontal-pose check. `landmarks` holds 15 doubles: (x, y, visibility) for
 * nose, left eye, right eye, left ear, right ear in that order, with
 * coordinates normalized to [0, 1]. `thresholds` may be NULL for defaults.
 *
 * # Safety
 * `landmarks` must hold 15 doubles; `out` must be valid.
 */
enum HrStatus hr_detect_frontal_pose(const double *landmarks,
                                     const struct HrPoseThresholds *thresholds,
                                     struct HrPoseVerdict *out);

/**
 * Rank-1/5/10 and mAP of query embeddings against gallery embeddings.
 * The viewpoint label doubles as the camera id.
 *
 * # Safety
 * Embedding buffers must hold `query->n * dim` and `gallery->n * dim`
 * doubles; `out` must be valid.
 */
enum HrStatus hr_evaluate(const struct HrLabels *query,
                          const double *query_emb,
                          const struct HrLabels *gallery,
                          const double *gallery_emb,
                          size_t dim,
                          int32_t mode,
                          bool exclude_same_camera,
                          struct HrEvalMetrics *out);

/**
 * Load a checkpoint file. Free the handle with [`hr_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid.
 */
enum HrStatus hr_model_load(const char *path, struct HrModel **out);

/**
 * Build a model from checkpoint JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be valid.
 */
enum HrStatus hr_model_from_json(const char *json, struct HrModel **out);

/**
 * Input feature dimension, or 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t hr_model_input_dim(const struct HrModel *model);

/**
 * Embedding dimension, or 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t hr_model_embed_dim(const struct HrModel *model);

/**
 * Embed `n` feature rows (n × input_dim) into `out` (n × embed_dim).
 *
 * # Safety
 * `model` must be a live handle; buffers must be sized as described.
 */
enum HrStatus hr_model_embed(const struct HrModel *model,
                             size_t n,
                             const double *features,
                             double *out);

/**
 * Release a model handle. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void hr_model_free(struct HrModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HARDREID_H */
