#ifndef TDNN_FORGE_H
#define TDNN_FORGE_H

/* Generated by cbindgen from src/lib.rs. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a fallible call.
typedef enum TdnnForgeStatus {
  TDNN_FORGE_STATUS_OK = 0,
  TDNN_FORGE_STATUS_NULL_POINTER = 1,
  TDNN_FORGE_STATUS_INVALID_ARGUMENT = 2,
  TDNN_FORGE_STATUS_CONFIG = 3,
  TDNN_FORGE_STATUS_DIMENSION = 4,
  TDNN_FORGE_STATUS_NUMERIC = 5,
  TDNN_FORGE_STATUS_IO = 6,
  TDNN_FORGE_STATUS_FORMAT = 7,
  TDNN_FORGE_STATUS_PANIC = 8,
} TdnnForgeStatus;

// Opaque model handle.
typedef struct TdnnForgeModel TdnnForgeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call on the same thread.
const char *tdnn_forge_last_error(void);

// Builds a preset model. `scale` is "tiny", "desk", "paper" or null/"" for
// the preset as published.
//
// # Safety
// `name` and `scale` must be null or NUL-terminated; `out` must be writable.
enum TdnnForgeStatus tdnn_forge_model_from_preset(const char *name,
                                                  const char *scale,
                                                  uint64_t seed,
                                                  struct TdnnForgeModel **out);

// Builds a model from an architecture config in JSON.
//
// # Safety
// `json` must be NUL-terminated; `out` must be writable.
enum TdnnForgeStatus tdnn_forge_model_from_json(const char *json,
                                                uint64_t seed,
                                                struct TdnnForgeModel **out);

// Loads a checkpoint file.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum TdnnForgeStatus tdnn_forge_model_load(const char *path, struct TdnnForgeModel **out);

// Writes the model as a checkpoint file.
//
// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum TdnnForgeStatus tdnn_forge_model_save(const struct TdnnForgeModel *model, const char *path);

// Releases a handle. Null is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void tdnn_forge_model_free(struct TdnnForgeModel *model);

// Stored scalar count; 0 for null.
//
// # Safety
// `model` must be null or come from this library.
uintptr_t tdnn_forge_model_param_count(const struct TdnnForgeModel *model);

// FC layers on the longest path, output layer included; 0 for null.
//
// # Safety
// `model` must be null or come from this library.
uintptr_t tdnn_forge_model_depth(const struct TdnnForgeModel *model);

// Output classes; 0 for null.
//
// # Safety
// `model` must be null or come from this library.
uintptr_t tdnn_forge_model_out_dim(const struct TdnnForgeModel *model);

// Feature dimension per frame; 0 for null.
//
// # Safety
// `model` must be null or come from this library.
uintptr_t tdnn_forge_model_feat_dim(const struct TdnnForgeModel *model);

// Logits for every frame of a `[n_frames, feat_dim]` row-major sequence,
// with edge padding at the ends. Writes `n_frames * out_dim` values.
//
// # Safety
// `frames` must hold `n_frames * feat_dim` values and `logits` must have
// room for `logits_len` values.
enum TdnnForgeStatus tdnn_forge_model_forward(const struct TdnnForgeModel *model,
                                              const double *frames,
                                              uintptr_t n_frames,
                                              uintptr_t feat_dim,
                                              double *logits,
                                              uintptr_t logits_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TDNN_FORGE_H */
