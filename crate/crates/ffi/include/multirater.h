#ifndef MULTIRATER_H
#define MULTIRATER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MrStatus {
  MR_STATUS_OK = 0,
  MR_STATUS_NULL_POINTER = 1,
  MR_STATUS_INVALID_ARGUMENT = 2,
  MR_STATUS_SHAPE_MISMATCH = 3,
  MR_STATUS_IO = 4,
  MR_STATUS_PARSE = 5,
  MR_STATUS_EMPTY_SET = 6,
  MR_STATUS_INTERNAL = 7,
} MrStatus;

/**
 * Opaque model handle.
 */
typedef struct MrModel MrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mr_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call on the same thread.
 */
const char *mr_last_error_message(void);

/**
 * Loads a checkpoint file into a new handle written to `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MrStatus mr_model_load(const char *path, struct MrModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mr_model_load`] and not be used afterwards.
 */
void mr_model_free(struct MrModel *model);

/**
 * Number of decoder branches (one per rater).
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum MrStatus mr_model_num_branches(const struct MrModel *model, uintptr_t *out);

/**
 * Runs Monte Carlo prediction on one `height * width` image.
 *
 * `fused_out` receives the fused probability map (`height * width` floats).
 * `samples_out` receives the thresholded per-draw masks, branch-major, and
 * must hold `capacity` bytes. The number of masks is written to
 * `*written`; deterministic models produce one mask per branch. When
 * `samples_out` is null only the count is reported.
 *
 * # Safety
 * Buffers must be valid for the sizes described above.
 */
enum MrStatus mr_model_predict(const struct MrModel *model,
                               const float *image,
                               uintptr_t height,
                               uintptr_t width,
                               uintptr_t n_mc,
                               uint64_t seed,
                               float *fused_out,
                               uint8_t *samples_out,
                               uintptr_t capacity,
                               uintptr_t *written);

/**
 * Per-pixel fraction of `count` masks marking foreground.
 *
 * # Safety
 * `masks` holds `count * height * width` bytes in {0, 1}; `out` holds
 * `height * width` doubles.
 */
enum MrStatus mr_probability_map(const uint8_t *masks,
                                 uintptr_t count,
                                 uintptr_t height,
                                 uintptr_t width,
                                 double *out);

/**
 * Q-score between two probability maps. `levels == 0` is rejected.
 *
 * # Safety
 * `pred` and `gt` hold `height * width` doubles in [0, 1].
 */
enum MrStatus mr_q_score(const double *pred,
                         const double *gt,
                         uintptr_t height,
                         uintptr_t width,
                         uintptr_t levels,
                         double *out);

/**
 * Generalized energy distance between two mask sets.
 *
 * # Safety
 * `pred` holds `n_pred` masks and `gt` holds `n_gt` masks of
 * `height * width` bytes each.
 */
enum MrStatus mr_ged(const uint8_t *pred,
                     uintptr_t n_pred,
                     const uint8_t *gt,
                     uintptr_t n_gt,
                     uintptr_t height,
                     uintptr_t width,
                     double *out);

/**
 * Mean pairwise distance within one mask set.
 *
 * # Safety
 * `masks` holds `count` masks of `height * width` bytes each.
 */
enum MrStatus mr_diversity(const uint8_t *masks,
                           uintptr_t count,
                           uintptr_t height,
                           uintptr_t width,
                           double *out);

/**
 * Best-match similarity of predicted masks to rater masks.
 *
 * # Safety
 * As for [`mr_ged`].
 */
enum MrStatus mr_similarity(const uint8_t *pred,
                            uintptr_t n_pred,
                            const uint8_t *gt,
                            uintptr_t n_gt,
                            uintptr_t height,
                            uintptr_t width,
                            double *out);

/**
 * `1 - IoU` of two masks.
 *
 * # Safety
 * `a` and `b` hold `height * width` bytes in {0, 1}.
 */
enum MrStatus mr_mask_distance(const uint8_t *a,
                               const uint8_t *b,
                               uintptr_t height,
                               uintptr_t width,
                               double *out);

/**
 * Writes a synthetic multi-rater dataset to `dir`. `config_json` is a JSON
 * object of generator settings; null or `"{}"` uses the defaults.
 *
 * # Safety
 * Both strings, when non-null, must be NUL-terminated.
 */
enum MrStatus mr_generate_dataset(const char *config_json, const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MULTIRATER_H */
