#ifndef ATTNFLOW_H
#define ATTNFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a call. Error classes match the CLI exit codes.
typedef enum AfStatus {
  AF_STATUS_OK = 0,
  // Null pointer, non-UTF-8 path or wrong buffer length.
  AF_STATUS_INVALID_ARGUMENT = 1,
  // Configuration, schema, version or digest problem.
  AF_STATUS_CONFIG = 2,
  AF_STATUS_NUMERICAL = 3,
  AF_STATUS_IO = 4,
  // A Rust panic was caught at the boundary.
  AF_STATUS_INTERNAL = 5,
} AfStatus;

// Loaded checkpoint.
typedef struct AfModel AfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *af_version(void);

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *af_last_error_message(void);

// Loads a checkpoint into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AfStatus af_model_load(const char *path, bool allow_digest_mismatch, struct AfModel **out);

// Releases a handle from [`af_model_load`]; null is ignored.
//
// # Safety
// `model` must come from [`af_model_load`] and not be freed twice.
void af_model_free(struct AfModel *model);

// Length of the embedding accepted by [`af_model_score_embedding`]; 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t af_model_embedding_dim(const struct AfModel *model);

// Anomaly score of the image at `path` (higher is more anomalous).
// `n_transforms == 0` uses the count stored in the checkpoint; rotations come
// from the checkpoint's seed, so scores match the CLI.
//
// # Safety
// `model` must be a live handle, `path` NUL-terminated and `out` valid.
enum AfStatus af_model_score_image(const struct AfModel *model,
                                   const char *path,
                                   size_t n_transforms,
                                   double *out);

// Negative log-likelihood of one embedding of length [`af_model_embedding_dim`].
//
// # Safety
// `embedding` must point to `len` doubles and `out` be valid.
enum AfStatus af_model_score_embedding(const struct AfModel *model,
                                       const double *embedding,
                                       size_t len,
                                       double *out);

// AUROC with anomalous as the positive class; ties count one half.
//
// # Safety
// Each pointer must reference the stated number of doubles; `out` must be valid.
enum AfStatus af_auroc(const double *flawless,
                       size_t n_flawless,
                       const double *anomalous,
                       size_t n_anomalous,
                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTNFLOW_H */
