/* C interface for pbat model inference. */

#ifndef PBAT_H
#define PBAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point.
 */
typedef enum PbatStatus {
  /**
   * Success.
   */
  PBAT_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  PBAT_STATUS_NULL_POINTER = 1,
  /**
   * An id, length, or value argument was out of range.
   */
  PBAT_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The checkpoint file could not be read.
   */
  PBAT_STATUS_IO = 3,
  /**
   * The checkpoint file was read but its contents are malformed.
   */
  PBAT_STATUS_FORMAT = 4,
  /**
   * Unexpected internal failure; details via `pbat_last_error`.
   */
  PBAT_STATUS_INTERNAL = 5,
} PbatStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct PbatModel PbatModel;

/**
 * Model dimensions, filled by [`pbat_model_dims`].
 */
typedef struct PbatDims {
  /**
   * Item vocabulary size; valid item ids are `0..num_items`.
   */
  uint32_t num_items;
  /**
   * User count; valid user ids are `0..num_users`.
   */
  uint32_t num_users;
  /**
   * Behavior count; valid behavior ids are `0..num_behaviors`.
   */
  uint32_t num_behaviors;
  /**
   * Maximum history window the encoder reads.
   */
  uint32_t max_seq_len;
  /**
   * Embedding width (informational).
   */
  uint32_t embed_dim;
} PbatDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model checkpoint written by `pbat train` and stores a fresh
 * handle in `*out`. Release with [`pbat_model_free`].
 */
enum PbatStatus pbat_model_load(const char *path, struct PbatModel **out);

/**
 * Releases a handle returned by [`pbat_model_load`]. Null is a no-op.
 */
void pbat_model_free(struct PbatModel *model);

/**
 * Reports the loaded model's dimensions.
 */
enum PbatStatus pbat_model_dims(const struct PbatModel *model, struct PbatDims *out);

/**
 * Scores candidate items for a user's next interaction.
 *
 * `items` and `behaviors` hold the user's history oldest-first, both of
 * length `history_len`; only the most recent `max_seq_len − 1` events
 * influence the result. `next_behavior` is the behavior the prediction is
 * for. On success `out_scores` (length `n_candidates`) receives one score
 * per candidate, aligned with `candidates`; higher means a closer match.
 */
enum PbatStatus pbat_score_next(const struct PbatModel *model,
                                uint32_t user,
                                const uint32_t *items,
                                const uint32_t *behaviors,
                                uintptr_t history_len,
                                uint32_t next_behavior,
                                const uint32_t *candidates,
                                uintptr_t n_candidates,
                                double *out_scores);

/**
 * Writes the global behavior-relation strength matrix into `out`,
 * row-major `num_behaviors × num_behaviors`.
 */
enum PbatStatus pbat_behavior_matrix(const struct PbatModel *model, double *out);

/**
 * Writes the behavior matrix personalized to `user`: relation strength
 * scaled by the distance between that user's behavior patterns, zero on
 * the diagonal. Same layout as [`pbat_behavior_matrix`].
 */
enum PbatStatus pbat_behavior_matrix_user(const struct PbatModel *model,
                                          uint32_t user,
                                          double *out);

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `cap − 1` bytes. Returns the full
 * message length in bytes (excluding the terminator); 0 means no error
 * has been recorded. `buf` may be null when `cap` is 0.
 */
uintptr_t pbat_last_error(char *buf, uintptr_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PBAT_H */
