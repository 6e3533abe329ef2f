#ifndef ANCHORED_ASR_H
#define ANCHORED_ASR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum AasrStatus {
  AASR_STATUS_OK = 0,
  AASR_STATUS_NULL_POINTER = 1,
  AASR_STATUS_INVALID_ARGUMENT = 2,
  AASR_STATUS_IO = 3,
  AASR_STATUS_FORMAT = 4,
  AASR_STATUS_NUMERIC = 5,
  /**
   * The output buffer is too small; the required length was written.
   */
  AASR_STATUS_BUFFER_TOO_SMALL = 6,
  AASR_STATUS_PANIC = 7,
} AasrStatus;

/**
 * Opaque trained or freshly initialised model.
 */
typedef struct AasrModel AasrModel;

/**
 * Edit operations of a minimal alignment.
 */
typedef struct AasrEditCounts {
  size_t substitutions;
  size_t insertions;
  size_t deletions;
} AasrEditCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call on the same thread.
 */
const char *aasr_last_error(void);

/**
 * Transducer loss `-log P(y|x)` of row-major logits `frames x (u+1) x
 * num_labels` (label 0 is blank). When `grad_out` is non-null it receives
 * the gradient with respect to the logits, of the same size.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `loss_out` must be
 * writable.
 */
enum AasrStatus aasr_rnnt_loss(const double *logits,
                               size_t frames,
                               const uint32_t *targets,
                               size_t target_len,
                               size_t num_labels,
                               double *loss_out,
                               double *grad_out);

/**
 * Gate value `sigmoid(cos(c, h))` of two `dim`-dimensional embeddings.
 *
 * # Safety
 * `c` and `h` must hold `dim` values; `out` must be writable.
 */
enum AasrStatus aasr_gate_bias(const double *c, const double *h, size_t dim, double *out);

/**
 * Substitution, insertion and deletion counts of a minimal alignment.
 *
 * # Safety
 * Sequences must hold the stated number of tokens; `out` must be writable.
 */
enum AasrStatus aasr_edit_distance(const uint32_t *reference,
                                   size_t reference_len,
                                   const uint32_t *hypothesis,
                                   size_t hypothesis_len,
                                   struct AasrEditCounts *out);

/**
 * Load a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AasrStatus aasr_model_load(const char *path, struct AasrModel **out);

/**
 * Freshly initialised model from a JSON system config (an empty string
 * selects the default anchored system).
 *
 * # Safety
 * `system_json` must be a NUL-terminated string; `out` must be writable.
 */
enum AasrStatus aasr_model_new(const char *system_json, uint64_t seed, struct AasrModel **out);

/**
 * Write a model checkpoint.
 *
 * # Safety
 * `model` must come from an `aasr_model_*` constructor; `path` must be a
 * NUL-terminated string.
 */
enum AasrStatus aasr_model_save(const struct AasrModel *model, const char *path);

/**
 * Raw feature width and vocabulary size (including blank) of a model.
 *
 * # Safety
 * `model` must be a live handle; the outputs must be writable.
 */
enum AasrStatus aasr_model_dims(const struct AasrModel *model, size_t *d_raw, size_t *vocab_size);

/**
 * Greedy decoding of `num_frames x d_raw` row-major features whose first
 * `anchor_len` frames are the anchor. Up to `capacity` tokens are written
 * to `tokens_out` and the hypothesis length to `len_out`; when the buffer
 * is too small nothing is copied and `AASR_STATUS_BUFFER_TOO_SMALL` is
 * returned with the required length in `len_out`.
 *
 * # Safety
 * `model` must be a live handle; `frames` must hold `num_frames * d_raw`
 * values and `tokens_out` `capacity` values; `len_out` must be writable.
 */
enum AasrStatus aasr_model_decode(const struct AasrModel *model,
                                  const double *frames,
                                  size_t num_frames,
                                  size_t d_raw,
                                  size_t anchor_len,
                                  uint32_t *tokens_out,
                                  size_t capacity,
                                  size_t *len_out);

/**
 * Release a model handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void aasr_model_free(struct AasrModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ANCHORED_ASR_H */
