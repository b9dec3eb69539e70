#ifndef FLMM_H
#define FLMM_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FlmmStatus {
  FLMM_STATUS_OK = 0,
  FLMM_STATUS_NULL_POINTER = 1,
  FLMM_STATUS_INVALID_ARGUMENT = 2,
  FLMM_STATUS_CONTRACT = 3,
  FLMM_STATUS_FORMAT = 4,
  FLMM_STATUS_IO = 5,
  FLMM_STATUS_EMPTY_MASK = 6,
  FLMM_STATUS_BUFFER_TOO_SMALL = 7,
  FLMM_STATUS_INTERNAL = 8,
} FlmmStatus;

/**
 * A toy host model with its grounding heads.
 */
typedef struct FlmmPipeline FlmmPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *flmm_version(void);

/**
 * Message of the last failed call on this thread, or an empty string.
 * Valid until the next call into this library on the same thread.
 */
const char *flmm_last_error(void);

/**
 * Loads heads from a checkpoint file.
 *
 * # Safety
 * `ckpt_path` must be a NUL-terminated string; `out` must be writable.
 */
enum FlmmStatus flmm_pipeline_open(const char *ckpt_path, struct FlmmPipeline **out);

/**
 * Fresh, untrained desk-size heads over the default toy host.
 *
 * # Safety
 * `out` must be writable.
 */
enum FlmmStatus flmm_pipeline_new_untrained(uint64_t seed, struct FlmmPipeline **out);

/**
 * # Safety
 * `p` must come from this library and not be used afterwards. Null is ignored.
 */
void flmm_pipeline_free(struct FlmmPipeline *p);

/**
 * Segments `expression` in a row-major RGB8 image, writing `height · width`
 * bytes (0 or 1) to `mask_out`.
 *
 * # Safety
 * `rgb8` must hold `3 · height · width` bytes, `mask_out` at least `mask_len`.
 */
enum FlmmStatus flmm_refer_segment(const struct FlmmPipeline *p,
                                   const uint8_t *rgb8,
                                   size_t height,
                                   size_t width,
                                   const char *expression,
                                   uint8_t *mask_out,
                                   size_t mask_len);

/**
 * Grounds a conversation and returns the JSON record (dataset schema plus
 * `scores`). `answer` may be null to generate one.
 *
 * # Safety
 * Pointers as in [`flmm_refer_segment`]; `json_out` must be writable.
 */
enum FlmmStatus flmm_ground_json(const struct FlmmPipeline *p,
                                 const uint8_t *rgb8,
                                 size_t height,
                                 size_t width,
                                 const char *user_text,
                                 const char *answer,
                                 char **json_out);

/**
 * Column-major RLE of a row-major 0/1 mask, as JSON `{"size": [h, w], "counts": [...]}`.
 *
 * # Safety
 * `mask` must hold `height · width` bytes; `json_out` must be writable.
 */
enum FlmmStatus flmm_rle_encode(const uint8_t *mask, size_t height, size_t width, char **json_out);

/**
 * Cumulative IoU over `count` mask pairs stored back to back.
 *
 * # Safety
 * `preds` and `gts` must each hold `count · height · width` bytes.
 */
enum FlmmStatus flmm_ciou(const uint8_t *preds,
                          const uint8_t *gts,
                          size_t count,
                          size_t height,
                          size_t width,
                          double *out);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards. Null is ignored.
 */
void flmm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLMM_H */
