#ifndef FTEASD_H
#define FTEASD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FteasdStatus {
  FTEASD_STATUS_OK = 0,
  FTEASD_STATUS_NULL_POINTER = 1,
  FTEASD_STATUS_INVALID_ARGUMENT = 2,
  FTEASD_STATUS_IO = 3,
  FTEASD_STATUS_FORMAT = 4,
  FTEASD_STATUS_NUMERIC = 5,
  FTEASD_STATUS_DIMENSION = 6,
  FTEASD_STATUS_BUFFER_TOO_SMALL = 7,
  FTEASD_STATUS_PANIC = 8,
} FteasdStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct FteasdModel FteasdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t fteasd_last_error(char *buf, size_t cap);

/**
 * Loads a checkpoint. On success `*out` owns a handle freed by [`fteasd_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
 */
enum FteasdStatus fteasd_model_load(const char *path, struct FteasdModel **out);

/**
 * Frees a handle; null is a no-op.
 *
 * # Safety
 * `model` must come from [`fteasd_model_load`] and not be used afterwards.
 */
void fteasd_model_free(struct FteasdModel *model);

/**
 * Writes the embedding length to `*dim`.
 *
 * # Safety
 * `model` must be a live handle and `dim` a valid pointer.
 */
enum FteasdStatus fteasd_model_embedding_dim(const struct FteasdModel *model, size_t *dim);

/**
 * Writes the sample rate the model expects to `*rate`.
 *
 * # Safety
 * `model` must be a live handle and `rate` a valid pointer.
 */
enum FteasdStatus fteasd_model_sample_rate(const struct FteasdModel *model, uint32_t *rate);

/**
 * Embeds one mono waveform at the model's sample rate. The clip is repeated
 * or cut to the configured length first. `out` receives `out_len` values,
 * which must be at least the embedding length.
 *
 * # Safety
 * `model` must be a live handle not used concurrently; `samples` must hold
 * `n_samples` values and `out` `out_len` writable values.
 */
enum FteasdStatus fteasd_model_embed(struct FteasdModel *model,
                                     const double *samples,
                                     size_t n_samples,
                                     double *out,
                                     size_t out_len);

/**
 * Mann-Whitney AUC of positive (anomalous) over negative (normal) scores.
 *
 * # Safety
 * `pos` and `neg` must hold `n_pos` and `n_neg` values; `out` must be valid.
 */
enum FteasdStatus fteasd_auc(const double *pos,
                             size_t n_pos,
                             const double *neg,
                             size_t n_neg,
                             double *out);

/**
 * Standardized partial AUC over false-positive rates up to `max_fpr`; pass a
 * non-positive value for the default of 0.1.
 *
 * # Safety
 * As for [`fteasd_auc`].
 */
enum FteasdStatus fteasd_pauc(const double *pos,
                              size_t n_pos,
                              const double *neg,
                              size_t n_neg,
                              double max_fpr,
                              double *out);

/**
 * Harmonic mean of `n` non-negative values.
 *
 * # Safety
 * `values` must hold `n` values; `out` must be valid.
 */
enum FteasdStatus fteasd_harmonic_mean(const double *values, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FTEASD_H */
