#ifndef AGECAST_H
#define AGECAST_H

/* Generated by cbindgen from the agecast-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes for every fallible call.
 */
typedef enum AgecastStatus {
  AGECAST_STATUS_OK = 0,
  /**
   * Invalid argument (NULL pointer, bad UTF-8, bad config value).
   */
  AGECAST_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Runtime failure (I/O, parse, numeric, divergence).
   */
  AGECAST_STATUS_RUNTIME_ERROR = 2,
} AgecastStatus;

/**
 * Opaque dataset handle.
 */
typedef struct AgecastDataset AgecastDataset;

/**
 * Opaque model handle (the checkpoint's run configuration rides along).
 */
typedef struct AgecastModel AgecastModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread. The pointer stays
 * valid until the next failing call on the same thread; do not free it.
 */
const char *agecast_last_error(void);

/**
 * Library version as a static NUL-terminated string; do not free.
 */
const char *agecast_version(void);

/**
 * Generate a synthetic dataset from a run-config TOML string (NULL or
 * empty for defaults). Returns NULL on failure; free with
 * `agecast_dataset_free`.
 *
 * # Safety
 * `config_toml` must be NULL or a valid NUL-terminated string.
 */
struct AgecastDataset *agecast_dataset_generate(const char *config_toml);

/**
 * Read a dataset CSV. Returns NULL on failure; free with
 * `agecast_dataset_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
struct AgecastDataset *agecast_dataset_read(const char *path);

/**
 * Write a dataset to CSV.
 *
 * # Safety
 * `dataset` must be a live handle from this library; `path` a valid string.
 */
enum AgecastStatus agecast_dataset_write(const struct AgecastDataset *dataset, const char *path);

/**
 * Number of samples; 0 for NULL.
 *
 * # Safety
 * `dataset` must be NULL or a live handle.
 */
uintptr_t agecast_dataset_len(const struct AgecastDataset *dataset);

/**
 * Feature dimension F; 0 for NULL.
 *
 * # Safety
 * `dataset` must be NULL or a live handle.
 */
uintptr_t agecast_dataset_feature_dim(const struct AgecastDataset *dataset);

/**
 * # Safety
 * `dataset` must be NULL or a handle returned by this library, not yet freed.
 */
void agecast_dataset_free(struct AgecastDataset *dataset);

/**
 * Train from a run-config TOML string (NULL or empty for defaults) on the
 * given dataset, writing checkpoints and logs into `out_dir`. On success
 * stores the final validation MAE through `out_val_mae` (may be NULL).
 *
 * # Safety
 * `dataset` must be a live handle; strings valid; `out_val_mae` NULL or
 * pointing at writable memory.
 */
enum AgecastStatus agecast_train(const char *config_toml,
                                 const struct AgecastDataset *dataset,
                                 const char *out_dir,
                                 double *out_val_mae);

/**
 * Load a model checkpoint. Returns NULL on failure; free with
 * `agecast_model_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
struct AgecastModel *agecast_model_load(const char *path);

/**
 * # Safety
 * `model` must be NULL or a handle returned by this library, not yet freed.
 */
void agecast_model_free(struct AgecastModel *model);

/**
 * Predict an age from one raw feature vector. Views are drawn with
 * `k_views` (0 means the model's configured eval K) from `view_seed`.
 *
 * # Safety
 * `model` must be a live handle; `features` must point at `feature_len`
 * readable f64s; `out_age` at writable memory.
 */
enum AgecastStatus agecast_model_infer(const struct AgecastModel *model,
                                       const double *features,
                                       uintptr_t feature_len,
                                       uintptr_t k_views,
                                       uint64_t view_seed,
                                       double *out_age);

/**
 * Evaluate a model on a dataset; writes MAE through `out_mae` and
 * optionally the predictions CSV to `predictions_path` (NULL to skip).
 * `k_eval` 0 means the model's configured eval K.
 *
 * # Safety
 * Handles must be live; strings valid or NULL as documented; `out_mae`
 * writable.
 */
enum AgecastStatus agecast_evaluate(const struct AgecastModel *model,
                                    const struct AgecastDataset *dataset,
                                    uintptr_t k_eval,
                                    const char *predictions_path,
                                    double *out_mae);

/**
 * Overall MAE plus the maximum per-group MAE gap for one grouping
 * ("age-range", "gender", "ethnicity", "gender-ethnicity") of a
 * predictions CSV.
 *
 * # Safety
 * Strings must be valid; out pointers NULL or writable.
 */
enum AgecastStatus agecast_bias_summary(const char *predictions_path,
                                        const char *grouping,
                                        double age_bin_width,
                                        double *out_overall_mae,
                                        double *out_max_group_gap);

/**
 * Run the full-model gradient check suite; writes the worst relative
 * error across all loss terms through `out_max_rel_error` (may be NULL).
 *
 * # Safety
 * `out_max_rel_error` must be NULL or writable.
 */
enum AgecastStatus agecast_gradcheck(uint64_t seed, double *out_max_rel_error);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* AGECAST_H */
