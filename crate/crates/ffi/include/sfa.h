#ifndef SFA_H
#define SFA_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum SfaStatus {
  SFA_STATUS_OK = 0,
  SFA_STATUS_NULL_ARGUMENT = 1,
  SFA_STATUS_INVALID_ARGUMENT = 2,
  SFA_STATUS_IO = 3,
  SFA_STATUS_FORMAT = 4,
  SFA_STATUS_SHAPE = 5,
  SFA_STATUS_SURGERY = 6,
  SFA_STATUS_PANIC = 7,
  SFA_STATUS_INTERNAL = 8,
} SfaStatus;

typedef enum SfaMode {
  SFA_MODE_BASELINE = 0,
  SFA_MODE_SFA = 1,
} SfaMode;

typedef enum SfaHeadPolicy {
  SFA_HEAD_POLICY_COPY = 0,
  SFA_HEAD_POLICY_REINIT = 1,
} SfaHeadPolicy;

/**
 * Opaque model handle: an architecture plus its parameters.
 */
typedef struct SfaModel SfaModel;

/**
 * Per-step training cost of one configuration.
 */
typedef struct SfaCost {
  uint64_t fwd_flops;
  uint64_t bwd_flops;
  uint64_t activation_bytes;
  uint64_t param_bytes;
  uint64_t optimizer_bytes;
  uint64_t gradient_bytes;
  uint64_t training_bytes;
} SfaCost;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *sfa_last_error(void);

/**
 * Freshly initialized model from a named preset (`desk`, `B`, `L`, `H`,
 * `g`) at `frames` frames.
 *
 * # Safety
 * `preset` must be a valid C string and `out` a valid pointer.
 */
enum SfaStatus sfa_model_new(const char *preset,
                             enum SfaMode mode,
                             uintptr_t frames,
                             uint64_t seed,
                             struct SfaModel **out);

/**
 * Load an SFAV1 checkpoint file.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum SfaStatus sfa_model_load(const char *path, struct SfaModel **out);

/**
 * Decode an SFAV1 checkpoint held in memory.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum SfaStatus sfa_model_load_bytes(const uint8_t *bytes, uintptr_t len, struct SfaModel **out);

/**
 * Write the model as an SFAV1 checkpoint file.
 *
 * # Safety
 * `model` must be a live handle and `path` a valid C string.
 */
enum SfaStatus sfa_model_save(const struct SfaModel *model, const char *path);

/**
 * Release a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void sfa_model_free(struct SfaModel *model);

/**
 * Clip length, class count and parameter count of a model.
 *
 * # Safety
 * `model` must be a live handle; each out pointer may be null.
 */
enum SfaStatus sfa_model_shape(const struct SfaModel *model,
                               uintptr_t *frames,
                               uintptr_t *classes,
                               uintptr_t *params);

/**
 * Stage-2 model from a Stage-1 model: spatial stage copied, temporal
 * positions resampled to `frames`, identity adapter added.
 *
 * # Safety
 * `stage1` must be a live handle and `out` a valid pointer.
 */
enum SfaStatus sfa_model_surgery(const struct SfaModel *stage1,
                                 uintptr_t frames,
                                 enum SfaHeadPolicy head,
                                 uint64_t seed,
                                 struct SfaModel **out);

/**
 * Logits for `batch` clips.
 *
 * `video` holds `batch * frames * image_size * image_size * channels`
 * pixel values in `[0, 1]`, laid out `[batch, frames, height, width,
 * channels]`. `logits` receives `batch * classes` values.
 *
 * # Safety
 * `model` must be a live handle, `video` must point to `video_len`
 * floats and `logits` to `logits_len` writable floats.
 */
enum SfaStatus sfa_model_forward(const struct SfaModel *model,
                                 enum SfaMode mode,
                                 const float *video,
                                 uintptr_t video_len,
                                 uintptr_t batch,
                                 float *logits,
                                 uintptr_t logits_len);

/**
 * Training cost of one step of a named preset at `frames` frames.
 *
 * # Safety
 * `preset` must be a valid C string and `out` a valid pointer.
 */
enum SfaStatus sfa_cost_estimate(const char *preset,
                                 enum SfaMode mode,
                                 uintptr_t frames,
                                 uintptr_t local_batch,
                                 uintptr_t bytes_per_value,
                                 struct SfaCost *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFA_H */
