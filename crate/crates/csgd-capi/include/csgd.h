/* C interface to the centripetal-SGD pruning library. */

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum CsgdStatus {
  // The call succeeded.
  CSGD_STATUS_OK = 0,
  // A required pointer argument was null.
  CSGD_STATUS_NULL_ARGUMENT = 1,
  // An argument, configuration, or model structure was rejected.
  CSGD_STATUS_INVALID_INPUT = 2,
  // A file could not be read, written, or decoded.
  CSGD_STATUS_IO = 3,
  // A trimmed model changed the network function beyond the lossless
  // tolerance, or two checkpoints were not equivalent.
  CSGD_STATUS_EQUIVALENCE_GATE = 4,
  // An unexpected internal failure.
  CSGD_STATUS_INTERNAL = 5,
} CsgdStatus;

// Opaque handle to a loaded model.
typedef struct CsgdModel CsgdModel;

// Shape and cost summary of a model.
typedef struct CsgdModelInfo {
  // Input height, width, and channel count.
  size_t input_h;
  size_t input_w;
  size_t input_c;
  // Number of output classes.
  size_t classes;
  // Number of convolution layers.
  size_t conv_layers;
  // Multiply-accumulate count of one forward pass.
  uint64_t flops;
  // Parameter count.
  uint64_t params;
} CsgdModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *csgd_version(void);

// Message describing the last failure on the calling thread, or an empty
// string if none occurred. The pointer stays valid until the next failing
// call on this thread.
const char *csgd_last_error_message(void);

// Loads a checkpoint from `path` into a new handle written to `out`.
// The caller owns the handle and must release it with `csgd_model_free`.
//
// # Safety
// `path` must be null or a NUL-terminated string; `out` must be null or
// writable.
enum CsgdStatus csgd_model_load(const char *path, struct CsgdModel **out);

// Saves the model to `path` as a checkpoint, preserving the seed and
// producer recorded when the handle was created.
//
// # Safety
// `model` must be null or a live handle from this library; `path` must be
// null or a NUL-terminated string.
enum CsgdStatus csgd_model_save(const struct CsgdModel *model, const char *path);

// Releases a handle. Passing null is a no-op.
//
// # Safety
// `model` must be null or a live handle from this library, and must not
// be used afterwards.
void csgd_model_free(struct CsgdModel *model);

// Writes the model's input shape, class count, and cost into `out`.
//
// # Safety
// `model` must be null or a live handle from this library; `out` must be
// null or writable.
enum CsgdStatus csgd_model_info(const struct CsgdModel *model, struct CsgdModelInfo *out);

// Runs one image through the network. `pixels` must hold exactly
// `input_h × input_w × input_c` values in row-major HWC order, and
// `logits` must have room for `classes` values.
//
// # Safety
// `model` must be null or a live handle from this library; `pixels` and
// `logits` must be null or valid for `pixel_count` reads and
// `logit_count` writes respectively.
enum CsgdStatus csgd_model_predict(const struct CsgdModel *model,
                                   const float *pixels,
                                   size_t pixel_count,
                                   float *logits,
                                   size_t logit_count);

// Clusters, snaps, and trims the model, writing a new handle to `out`.
//
// `config_toml` is an experiment configuration document; its `[csgd]`
// section supplies the cluster scheme, remaining-filter ratio or explicit
// targets, exclusions, and the snap tolerance. The model must already
// have near-identical filters within each cluster (train it with the
// centripetal optimizer first): if any cluster deviates beyond the snap
// tolerance the call fails with `InvalidInput`, and if the trimmed model
// changes any logit by more than the lossless tolerance it fails with
// `EquivalenceGate`. On success (and on a gate failure) the largest
// observed logit difference is written to `max_logit_diff` when that
// pointer is non-null.
//
// # Safety
// `model` must be null or a live handle from this library; `config_toml`
// must be null or a NUL-terminated string; `out` must be null or
// writable; `max_logit_diff` may be null or must be writable.
enum CsgdStatus csgd_model_trim(const struct CsgdModel *model,
                                const char *config_toml,
                                uint64_t seed,
                                struct CsgdModel **out,
                                float *max_logit_diff);

// Measures the largest absolute logit difference between two models on
// `samples` random inputs (0 means the default sample count) and writes
// it to `max_logit_diff`. Returns `EquivalenceGate` when the difference
// exceeds the lossless tolerance; the measured value is still written.
//
// # Safety
// `first` and `second` must be null or live handles from this library;
// `max_logit_diff` must be null or writable.
enum CsgdStatus csgd_verify_equivalence(const struct CsgdModel *first,
                                        const struct CsgdModel *second,
                                        size_t samples,
                                        uint64_t seed,
                                        float *max_logit_diff);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
