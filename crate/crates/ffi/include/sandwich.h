#ifndef SANDWICH_H
#define SANDWICH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Values 1 to 10 match the `sandwich` binary's exit codes.
 */
typedef enum SwStatus {
  SW_STATUS_OK = 0,
  SW_STATUS_CONFIG = 2,
  SW_STATUS_INFEASIBLE = 3,
  SW_STATUS_LAYOUT = 4,
  SW_STATUS_STATE_MISMATCH = 5,
  SW_STATUS_FORMAT = 6,
  SW_STATUS_MISSING_EXPERT = 7,
  SW_STATUS_MEMORY_GUARD = 8,
  SW_STATUS_NUMERICS = 9,
  SW_STATUS_IO = 10,
  SW_STATUS_NULL_POINTER = 11,
  /**
   * A buffer had the wrong length or a string was not UTF-8.
   */
  SW_STATUS_INVALID_ARGUMENT = 12,
  SW_STATUS_PANIC = 13,
} SwStatus;

/**
 * Chunked streaming generator.
 */
typedef struct SwEngine SwEngine;

/**
 * Hard routing layout.
 */
typedef struct SwLayout SwLayout;

typedef struct SwChunkPlan {
  size_t frames_per_chunk;
  /**
   * Euler steps per chunk.
   */
  size_t steps;
  size_t height;
  size_t width;
} SwChunkPlan;

typedef struct SwCacheBytes {
  size_t lin_attn;
  size_t conv_ring;
  size_t ssa_kv;
  size_t high_kv;
} SwCacheBytes;

typedef struct SwLatencyInputs {
  double text_encoder_ms;
  double dit_step_ms;
  double decoder_ms;
  size_t steps;
  size_t frames_per_chunk;
} SwLatencyInputs;

typedef struct SwLatencyReport {
  double chunk_ms;
  double fps;
} SwLatencyReport;

typedef struct SwBudget {
  double latency_lcha;
  double latency_ssa;
  double memory_lcha;
  double memory_ssa;
  size_t blocks;
  double latency_max;
  double memory_max;
} SwBudget;

typedef struct SwAllocation {
  size_t n_lcha;
  size_t n_ssa;
  double latency;
  double memory;
} SwAllocation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, NUL-terminated and static.
 */
const char *sw_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *sw_last_error(void);

/**
 * Loads a layout JSON file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SwStatus sw_layout_load(const char *path, struct SwLayout **out);

/**
 * Number of routing groups, or 0 for a null handle.
 *
 * # Safety
 * `layout` must be null or a live handle.
 */
size_t sw_layout_groups(const struct SwLayout *layout);

/**
 * Copies the routing mask into `buf` (`cap` bytes, at least the group count).
 *
 * # Safety
 * `layout` must be a live handle and `buf` must hold `cap` bytes.
 */
enum SwStatus sw_layout_mask(const struct SwLayout *layout, uint8_t *buf, size_t cap);

/**
 * # Safety
 * `layout` must be null or a handle from [`sw_layout_load`] not yet freed.
 */
void sw_layout_free(struct SwLayout *layout);

/**
 * Builds a streaming engine for `layout`. Weights are drawn from `seed`, then
 * replaced from the checkpoint directory `weights` when it is not null.
 * `window` is the strided-attention KV window in chunks; 0 keeps every chunk.
 *
 * # Safety
 * `layout` must be a live handle, `plan` and `out` valid pointers and
 * `weights` null or a NUL-terminated string.
 */
enum SwStatus sw_engine_new(const struct SwLayout *layout,
                            const char *weights,
                            uint64_t seed,
                            const struct SwChunkPlan *plan,
                            size_t window,
                            struct SwEngine **out);

/**
 * Values in one chunk of latents (`tokens * in_channels`), or 0 for a null handle.
 *
 * # Safety
 * `engine` must be null or a live handle.
 */
size_t sw_engine_chunk_len(const struct SwEngine *engine);

/**
 * Length of the text embedding, or 0 for a null handle.
 *
 * # Safety
 * `engine` must be null or a live handle.
 */
size_t sw_engine_text_dim(const struct SwEngine *engine);

/**
 * Chunks generated since creation or the last reset.
 *
 * # Safety
 * `engine` must be null or a live handle.
 */
size_t sw_engine_chunks_done(const struct SwEngine *engine);

/**
 * Denoises one chunk of `noise` and writes the clean latents to `out`.
 * `noise` and `out` hold [`sw_engine_chunk_len`] values, `text` holds
 * [`sw_engine_text_dim`]. On failure `out` is untouched.
 *
 * # Safety
 * `engine` must be a live handle not used concurrently; the buffers must
 * hold the stated number of values.
 */
enum SwStatus sw_engine_step(struct SwEngine *engine,
                             const double *noise,
                             size_t noise_len,
                             const double *text,
                             size_t text_len,
                             double *out,
                             size_t out_len);

/**
 * Clears every cache; the next chunk starts a fresh stream.
 *
 * # Safety
 * `engine` must be null or a live handle.
 */
void sw_engine_reset(struct SwEngine *engine);

/**
 * # Safety
 * `engine` must be a live handle and `out` writable.
 */
enum SwStatus sw_engine_cache_bytes(const struct SwEngine *engine, struct SwCacheBytes *out);

/**
 * # Safety
 * `engine` must be null or a handle from [`sw_engine_new`] not yet freed.
 */
void sw_engine_free(struct SwEngine *engine);

/**
 * Per-chunk latency and throughput from component timings.
 *
 * # Safety
 * `inputs` and `out` must be valid pointers.
 */
enum SwStatus sw_latency_model(const struct SwLatencyInputs *inputs, struct SwLatencyReport *out);

/**
 * Splits `budget.blocks` into LCHA and SSA counts under the latency and memory limits.
 *
 * # Safety
 * `budget` and `out` must be valid pointers.
 */
enum SwStatus sw_allocate_blocks(const struct SwBudget *budget, struct SwAllocation *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SANDWICH_H */
