#ifndef MLTR_H
#define MLTR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum MltrStatus {
  MLTR_STATUS_OK = 0,
  MLTR_STATUS_NULL_POINTER = 1,
  MLTR_STATUS_INVALID_ARGUMENT = 2,
  MLTR_STATUS_IO = 3,
  MLTR_STATUS_FORMAT = 4,
  MLTR_STATUS_MISMATCH = 5,
  MLTR_STATUS_CORRUPT = 6,
  MLTR_STATUS_SHAPE = 7,
  MLTR_STATUS_PANIC = 8,
} MltrStatus;

// A loaded model together with its run configuration.
typedef struct MltrModel MltrModel;

// Evaluation metrics of a confusion matrix.
typedef struct MltrMetrics {
  double accuracy;
  double f1_macro;
  double qw_kappa;
} MltrMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after success.
// The pointer stays valid until the next call on the same thread.
const char *mltr_last_error(void);

// Library version as a static NUL-terminated string.
const char *mltr_version(void);

// Loads a checkpoint file written by `mltr train`.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
enum MltrStatus mltr_model_load(const char *path, struct MltrModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from [`mltr_model_load`] and not be used afterwards.
void mltr_model_free(struct MltrModel *model);

// Model input shape and number of classes.
//
// # Safety
// `model` must be a live handle; each output pointer may be null.
enum MltrStatus mltr_model_info(const struct MltrModel *model,
                                size_t *channels,
                                size_t *height,
                                size_t *width,
                                size_t *n_classes);

// Logits for one preprocessed image given as `C×H×W` floats in `[0, 1]`.
//
// # Safety
// `pixels` must hold `pixels_len` floats and `logits` `logits_len`
// writable floats.
enum MltrStatus mltr_model_predict(const struct MltrModel *model,
                                   const float *pixels,
                                   size_t pixels_len,
                                   float *logits,
                                   size_t logits_len);

// Logits for one raw 8-bit image (interleaved, 1 or 3 channels), applying
// the model's preprocessing first.
//
// # Safety
// `pixels` must hold `width·height·channels` bytes and `logits`
// `logits_len` writable floats.
enum MltrStatus mltr_model_predict_u8(const struct MltrModel *model,
                                      const uint8_t *pixels,
                                      size_t width,
                                      size_t height,
                                      size_t channels,
                                      float *logits,
                                      size_t logits_len);

// Accuracy, macro F1 and quadratic weighted kappa of a `k×k` confusion
// matrix stored row-major with rows indexing the true class.
//
// # Safety
// `counts` must hold `k·k` values and `out` be a valid pointer.
enum MltrStatus mltr_metrics(const uint64_t *counts, size_t k, struct MltrMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MLTR_H */
