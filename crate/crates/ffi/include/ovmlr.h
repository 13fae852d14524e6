#ifndef OVMLR_H
#define OVMLR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Evaluation modes for [`ovmlr_evaluate`].
 */
typedef enum OvmlrMode {
  /**
   * Unseen classes only.
   */
  OVMLR_MODE_ZSL = 0,
  /**
   * Seen and unseen classes.
   */
  OVMLR_MODE_GZSL = 1,
} OvmlrMode;

/**
 * Result codes. The first four match the command-line exit codes.
 */
typedef enum OvmlrStatus {
  OVMLR_STATUS_OK = 0,
  /**
   * Invalid configuration, shape or contract violation.
   */
  OVMLR_STATUS_INVALID = 1,
  /**
   * File missing, unreadable or malformed.
   */
  OVMLR_STATUS_IO = 2,
  /**
   * Network failure talking to a language-model endpoint.
   */
  OVMLR_STATUS_TRANSPORT = 3,
  /**
   * A required pointer argument was null.
   */
  OVMLR_STATUS_NULL_ARGUMENT = 4,
  /**
   * Unknown image id or class index.
   */
  OVMLR_STATUS_LOOKUP = 5,
  /**
   * A string argument was not valid UTF-8.
   */
  OVMLR_STATUS_UTF8 = 6,
  /**
   * The output buffer is too small.
   */
  OVMLR_STATUS_BUFFER_TOO_SMALL = 7,
  /**
   * Internal panic; the handle involved should be freed.
   */
  OVMLR_STATUS_PANIC = 8,
} OvmlrStatus;

/**
 * Loaded dataset handle.
 */
typedef struct OvmlrDataset OvmlrDataset;

/**
 * Loaded model (checkpoint) handle.
 */
typedef struct OvmlrModel OvmlrModel;

/**
 * Summary metrics of one evaluation.
 */
typedef struct OvmlrReport {
  double map;
  size_t k;
  double precision;
  double recall;
  double f1;
  size_t images;
} OvmlrReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ovmlr_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ovmlr_version(void);

/**
 * Loads a checkpoint and rebuilds its model.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum OvmlrStatus ovmlr_model_load(const char *path, struct OvmlrModel **out);

/**
 * Releases a model handle; null is ignored.
 *
 * # Safety
 * `model` must come from [`ovmlr_model_load`] and not be used afterwards.
 */
void ovmlr_model_free(struct OvmlrModel *model);

/**
 * Vocabulary size; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ovmlr_model_num_classes(const struct OvmlrModel *model);

/**
 * Expected raw patch grid: patches per image and values per patch.
 *
 * # Safety
 * `model` must be a live handle; the outputs must be writable.
 */
enum OvmlrStatus ovmlr_model_input_shape(const struct OvmlrModel *model,
                                         size_t *num_patches,
                                         size_t *patch_dim);

/**
 * Copies class `index`'s name into `buf` (NUL-terminated). Fails with
 * `BufferTooSmall` when `len` cannot hold it; `*needed` always receives
 * the length including the NUL.
 *
 * # Safety
 * `model` must be a live handle, `buf` must hold `len` bytes, `needed` may be null.
 */
enum OvmlrStatus ovmlr_model_class_name(const struct OvmlrModel *model,
                                        size_t index,
                                        char *buf,
                                        size_t len,
                                        size_t *needed);

/**
 * Scores one image: `patches` is row-major `num_patches × patch_dim`;
 * writes one score per class into `scores` (length `num_classes`).
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum OvmlrStatus ovmlr_model_predict(const struct OvmlrModel *model,
                                     const double *patches,
                                     size_t num_patches,
                                     size_t patch_dim,
                                     double *scores,
                                     size_t num_classes);

/**
 * Patch-level scores of one class for one image, row-major over the grid
 * (`out` has `num_patches` entries).
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum OvmlrStatus ovmlr_model_patch_scores(const struct OvmlrModel *model,
                                          const double *patches,
                                          size_t num_patches,
                                          size_t patch_dim,
                                          size_t class_,
                                          double *out);

/**
 * Loads a JSON-lines dataset.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum OvmlrStatus ovmlr_dataset_load(const char *path, struct OvmlrDataset **out);

/**
 * Releases a dataset handle; null is ignored.
 *
 * # Safety
 * `data` must come from [`ovmlr_dataset_load`] and not be used afterwards.
 */
void ovmlr_dataset_free(struct OvmlrDataset *data);

/**
 * Number of images; 0 for a null handle.
 *
 * # Safety
 * `data` must be null or a live handle.
 */
size_t ovmlr_dataset_len(const struct OvmlrDataset *data);

/**
 * Evaluates the model on the dataset's test split at top-`k`.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum OvmlrStatus ovmlr_evaluate(const struct OvmlrModel *model,
                                const struct OvmlrDataset *data,
                                enum OvmlrMode mode,
                                size_t k,
                                struct OvmlrReport *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* OVMLR_H */
