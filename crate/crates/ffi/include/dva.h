#ifndef DVA_H
#define DVA_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DvaStatus {
  DVA_STATUS_OK = 0,
  DVA_STATUS_NULL_POINTER = 1,
  DVA_STATUS_INVALID_ARGUMENT = 2,
  DVA_STATUS_CONFIG = 3,
  DVA_STATUS_SHAPE = 4,
  DVA_STATUS_STEP = 5,
  DVA_STATUS_NON_FINITE = 6,
  DVA_STATUS_UNAVAILABLE = 7,
  DVA_STATUS_PARSE = 8,
  DVA_STATUS_IO = 9,
  DVA_STATUS_TENSOR = 10,
  DVA_STATUS_BUFFER_SIZE = 11,
  DVA_STATUS_PANIC = 12,
} DvaStatus;

/**
 * Which factor [`dva_swap`] takes from the second video.
 */
typedef enum DvaSwapKind {
  DVA_SWAP_KIND_IDENTITY = 0,
  DVA_SWAP_KIND_MOTION = 1,
  DVA_SWAP_KIND_BACKGROUND = 2,
} DvaSwapKind;

/**
 * The latents of one encoded video.
 */
typedef struct DvaBundle DvaBundle;

/**
 * A loaded checkpoint.
 */
typedef struct DvaModel DvaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error of this thread, NUL-terminated and truncated to
 * `capacity`, into `buf`. Returns the byte length needed for the full
 * message including the terminator; `buf` may be null to query it.
 *
 * # Safety
 * `buf` must be null or valid for `capacity` bytes.
 */
size_t dva_last_error(char *buf, size_t capacity);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dva_version(void);

/**
 * Loads a checkpoint written by `dva train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
enum DvaStatus dva_model_load(const char *path, struct DvaModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`dva_model_load`] not yet freed.
 */
void dva_model_free(struct DvaModel *model);

/**
 * Side length of the square frames the model works on.
 *
 * # Safety
 * `model` must be a live handle; `out` valid for a write.
 */
enum DvaStatus dva_model_image_size(const struct DvaModel *model, size_t *out);

/**
 * Encodes `num_frames` frames with `steps` deterministic inversion steps.
 *
 * # Safety
 * `frames` must hold `num_frames * 3 * size * size` floats; `out` must be
 * valid for a write.
 */
enum DvaStatus dva_encode(const struct DvaModel *model,
                          const float *frames,
                          size_t num_frames,
                          size_t steps,
                          struct DvaBundle **out);

/**
 * # Safety
 * `bundle` must be null or a live bundle handle.
 */
void dva_bundle_free(struct DvaBundle *bundle);

/**
 * # Safety
 * `bundle` must be a live handle; `out` valid for a write.
 */
enum DvaStatus dva_bundle_num_frames(const struct DvaBundle *bundle, size_t *out);

/**
 * Writes the bundle into directory `dir`.
 *
 * # Safety
 * `bundle` must be a live handle; `dir` a NUL-terminated string.
 */
enum DvaStatus dva_bundle_write(const struct DvaBundle *bundle, const char *dir);

/**
 * Reads a bundle written by [`dva_bundle_write`] or `dva encode`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` valid for a write.
 */
enum DvaStatus dva_bundle_read(const char *dir, struct DvaBundle **out);

/**
 * Decodes the bundle into `out`, which must hold exactly
 * `num_frames * 3 * size * size` floats.
 *
 * # Safety
 * Handles must be live; `out` valid for `len` floats.
 */
enum DvaStatus dva_decode(const struct DvaModel *model,
                          const struct DvaBundle *bundle,
                          float *out,
                          size_t len);

/**
 * Decodes with fresh noise maps drawn from `seed` in place of the encoded ones.
 *
 * # Safety
 * As [`dva_decode`].
 */
enum DvaStatus dva_decode_random_noise(const struct DvaModel *model,
                                       const struct DvaBundle *bundle,
                                       uint64_t seed,
                                       float *out,
                                       size_t len);

/**
 * Decodes video `a` with one factor taken from video `b`. The output has
 * the frame count of `a` (identity swap) or of either (motion and
 * background swaps require equal counts).
 *
 * # Safety
 * As [`dva_decode`].
 */
enum DvaStatus dva_swap(const struct DvaModel *model,
                        const struct DvaBundle *a,
                        const struct DvaBundle *b,
                        enum DvaSwapKind which,
                        float *out,
                        size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DVA_H */
