#ifndef DEEPFUSE_H
#define DEEPFUSE_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum DfStatus {
  DF_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  DF_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument was out of range or malformed.
   */
  DF_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file could not be read or written.
   */
  DF_STATUS_IO = 3,
  /**
   * Invalid configuration, or a checkpoint for another architecture.
   */
  DF_STATUS_CONFIG = 4,
  /**
   * Undecodable image, bad landmarks or inconsistent shapes.
   */
  DF_STATUS_DATA = 5,
  /**
   * Corrupt or unsupported checkpoint file.
   */
  DF_STATUS_CHECKPOINT = 6,
  /**
   * An internal panic was caught.
   */
  DF_STATUS_PANIC = 7,
} DfStatus;

/**
 * Cut-out mode for [`df_augment`].
 */
typedef enum DfCutoutMode {
  DF_CUTOUT_MODE_NONE = 0,
  DF_CUTOUT_MODE_FACE = 1,
  DF_CUTOUT_MODE_RANDOM = 2,
} DfCutoutMode;

/**
 * Opaque model handle.
 */
typedef struct DfModel DfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *df_version(void);

/**
 * Side of the square model input.
 */
size_t df_input_size(void);

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *df_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void df_string_free(char *s);

/**
 * Freshly initialized model of a named preset (`toy`, `small`, `paper`).
 *
 * # Safety
 * `preset` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DfStatus df_model_new(const char *preset, uint64_t seed, struct DfModel **out);

/**
 * Loads a checkpoint written by `deepfuse train` or [`df_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DfStatus df_model_load(const char *path, struct DfModel **out);

/**
 * Writes the model's parameters to `path`.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum DfStatus df_model_save(const struct DfModel *model, const char *path);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`df_model_new`] or [`df_model_load`] and not
 * have been freed already.
 */
void df_model_free(struct DfModel *model);

/**
 * Total number of learnable scalars.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum DfStatus df_model_param_count(const struct DfModel *model, size_t *out);

/**
 * Architecture as a JSON string; release it with [`df_string_free`].
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum DfStatus df_model_config_json(const struct DfModel *model, char **out);

/**
 * Fake probabilities for `n` preprocessed inputs laid out as
 * `[n, 3, 224, 224]` floats (the output of [`df_augment`]).
 *
 * # Safety
 * `inputs` must hold `n * 3 * 224 * 224` floats and `out` room for `n` doubles.
 */
enum DfStatus df_model_predict(const struct DfModel *model,
                               const float *inputs,
                               size_t n,
                               double *out);

/**
 * Video score: decodes `n` frame files (PPM or PNG), scores each without
 * augmentation and averages the probabilities.
 *
 * # Safety
 * `paths` must hold `n` NUL-terminated strings and `out_score` be valid.
 */
enum DfStatus df_model_score_video(const struct DfModel *model,
                                   const char *const *paths,
                                   size_t n,
                                   double *out_score);

/**
 * Arithmetic mean of `n` frame probabilities.
 *
 * # Safety
 * `probs` must hold `n` doubles and `out` be valid.
 */
enum DfStatus df_aggregate(const double *probs, size_t n, double *out);

/**
 * Runs the augmentation pipeline with default ranges on an interleaved
 * 8-bit RGB image and writes the normalized `[3, 224, 224]` tensor.
 * `landmarks` is null or 81 `(x, y)` pairs and is required by face cut-out.
 *
 * # Safety
 * `rgb` must hold `width * height * 3` bytes, `landmarks` (if not null)
 * 162 doubles, and `out` room for `3 * 224 * 224` floats.
 */
enum DfStatus df_augment(const uint8_t *rgb,
                         size_t width,
                         size_t height,
                         const double *landmarks,
                         uint32_t mode,
                         uint64_t seed,
                         float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEEPFUSE_H */
