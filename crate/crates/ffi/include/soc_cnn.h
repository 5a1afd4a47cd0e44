#ifndef SOC_CNN_H
#define SOC_CNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum SocCnnStatus {
  SOC_CNN_STATUS_OK = 0,
  SOC_CNN_STATUS_NULL_POINTER = 1,
  SOC_CNN_STATUS_INVALID_PATH = 2,
  SOC_CNN_STATUS_IO = 3,
  SOC_CNN_STATUS_MODEL_FORMAT = 4,
  SOC_CNN_STATUS_SHAPE_MISMATCH = 5,
  SOC_CNN_STATUS_INVALID_ARGUMENT = 6,
  SOC_CNN_STATUS_PANIC = 7,
} SocCnnStatus;

/**
 * A loaded model. Only ever handled through a pointer.
 */
typedef struct SocCnnModel SocCnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null if none.
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *soc_cnn_last_error(void);

/**
 * Number of features per time step (voltage, current, temperature).
 */
size_t soc_cnn_channels(void);

/**
 * Loads a model file into `*out`. `*out` is left untouched on failure.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SocCnnStatus soc_cnn_model_load(const char *path, struct SocCnnModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`soc_cnn_model_load`] and not be used afterwards.
 */
void soc_cnn_model_free(struct SocCnnModel *model);

/**
 * Window length (time steps) the model expects.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum SocCnnStatus soc_cnn_model_window_len(const struct SocCnnModel *model, size_t *out);

/**
 * Estimates SoC (fraction, not percent) from a raw window of
 * `window_len` rows of (voltage V, current A, temperature °C), row-major,
 * oldest first. The model's stored normalization is applied.
 *
 * # Safety
 * `window` must point to `len` readable doubles and `out` be valid.
 */
enum SocCnnStatus soc_cnn_model_predict(const struct SocCnnModel *model,
                                        const double *window,
                                        size_t len,
                                        double *out);

/**
 * As [`soc_cnn_model_predict`] for a window that is already normalized.
 *
 * # Safety
 * Same as [`soc_cnn_model_predict`].
 */
enum SocCnnStatus soc_cnn_model_predict_normalized(const struct SocCnnModel *model,
                                                   const double *window,
                                                   size_t len,
                                                   double *out);

/**
 * Writes the model to `path` (atomically).
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum SocCnnStatus soc_cnn_model_save(const struct SocCnnModel *model, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOC_CNN_H */
