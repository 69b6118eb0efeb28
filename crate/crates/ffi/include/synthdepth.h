#ifndef SYNTHDEPTH_H
#define SYNTHDEPTH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SdStatus {
  SD_STATUS_OK = 0,
  SD_STATUS_NULL_POINTER = 1,
  SD_STATUS_INVALID_UTF8 = 2,
  SD_STATUS_SHAPE = 3,
  SD_STATUS_IO = 4,
  SD_STATUS_LABEL = 5,
  SD_STATUS_CONFIG = 6,
  SD_STATUS_EMPTY_DATASET = 7,
  SD_STATUS_INIT = 8,
  SD_STATUS_INDEX = 9,
  SD_STATUS_NUMERICAL = 10,
  SD_STATUS_SCHEDULE = 11,
  SD_STATUS_EMPTY_EVAL = 12,
  SD_STATUS_DIVERGED = 13,
  SD_STATUS_CONSISTENCY = 14,
  SD_STATUS_CHECKPOINT = 15,
  SD_STATUS_SERIALIZATION = 16,
  SD_STATUS_LOCKED = 17,
  SD_STATUS_PANIC = 18,
} SdStatus;

/**
 * Experimental arm, in comparison-table order.
 */
typedef enum SdArm {
  SD_ARM_RGB_ONLY = 0,
  SD_ARM_PARTIAL_DEPTH = 1,
  SD_ARM_RGB_SYNTH_DEPTH = 2,
  SD_ARM_RGB_DEPTH = 3,
} SdArm;

/**
 * Opaque experiment configuration.
 */
typedef struct SdConfig SdConfig;

/**
 * Opaque trained generator.
 */
typedef struct SdGenerator SdGenerator;

/**
 * Opaque trained segmentation network.
 */
typedef struct SdSegmenter SdSegmenter;

/**
 * Binary confusion counts with building as the positive class.
 */
typedef struct SdConfusion {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  uint64_t tn;
} SdConfusion;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *sd_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sd_version(void);

/**
 * Loads an experiment configuration from a TOML file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SdStatus sd_config_load(const char *path, struct SdConfig **out);

/**
 * Desk-scale preset over the given dataset and output roots.
 *
 * # Safety
 * Both paths must be NUL-terminated strings and `out` a writable pointer.
 */
enum SdStatus sd_config_toy(const char *dataset_root,
                            const char *output_root,
                            struct SdConfig **out);

/**
 * Overrides the master seed.
 *
 * # Safety
 * `cfg` must be a live handle from this library.
 */
enum SdStatus sd_config_set_seed(struct SdConfig *cfg, uint64_t seed);

/**
 * # Safety
 * `cfg` must be null or a handle from this library not yet freed.
 */
void sd_config_free(struct SdConfig *cfg);

/**
 * Validates the dataset and writes the split manifest.
 *
 * # Safety
 * `cfg` must be a live handle from this library.
 */
enum SdStatus sd_prepare(struct SdConfig *cfg);

/**
 * Trains the segmentation model of one arm.
 *
 * # Safety
 * `cfg` must be a live handle from this library.
 */
enum SdStatus sd_train_seg(struct SdConfig *cfg, enum SdArm arm);

/**
 * Trains the depth generator.
 *
 * # Safety
 * `cfg` must be a live handle from this library.
 */
enum SdStatus sd_train_gan(struct SdConfig *cfg);

/**
 * Evaluates `n_arms` arms and writes the comparison table under the
 * output root.
 *
 * # Safety
 * `cfg` must be a live handle and `arms` must point to `n_arms` values.
 */
enum SdStatus sd_evaluate(struct SdConfig *cfg, const enum SdArm *arms, size_t n_arms);

/**
 * Loads a generator checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SdStatus sd_generator_load(const char *path, struct SdGenerator **out);

/**
 * Side length every input dimension must be divisible by.
 *
 * # Safety
 * `g` must be a live handle from this library.
 */
size_t sd_generator_size_multiple(const struct SdGenerator *g);

/**
 * Synthetic depth for an `height`x`width` interleaved RGB image, tiled
 * with `patch_size` squares. Writes `height*width` values to `depth_out`.
 *
 * # Safety
 * `rgb` must hold `3*height*width` bytes and `depth_out` room for
 * `height*width` floats.
 */
enum SdStatus sd_generator_infer(struct SdGenerator *g,
                                 const uint8_t *rgb,
                                 size_t height,
                                 size_t width,
                                 size_t patch_size,
                                 float *depth_out);

/**
 * # Safety
 * `g` must be null or a handle from this library not yet freed.
 */
void sd_generator_free(struct SdGenerator *g);

/**
 * Converts network-range depth to meters in place.
 *
 * # Safety
 * `depth` must hold `n` floats.
 */
enum SdStatus sd_depth_to_meters(float *depth, size_t n, float clip_max);

/**
 * Loads a segmentation checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SdStatus sd_segmenter_load(const char *path, struct SdSegmenter **out);

/**
 * 3 for RGB models, 4 for RGB plus depth.
 *
 * # Safety
 * `s` must be a live handle from this library.
 */
size_t sd_segmenter_in_channels(const struct SdSegmenter *s);

/**
 * # Safety
 * `s` must be a live handle from this library.
 */
size_t sd_segmenter_size_multiple(const struct SdSegmenter *s);

/**
 * Per-pixel classes (1 building, 0 ground) for one image whose sides are
 * multiples of the size multiple. `depth` may be null for RGB models and
 * is required for RGB plus depth models; pass zeros for missing depth.
 *
 * # Safety
 * `rgb` must hold `3*height*width` bytes, `depth` (when non-null)
 * `height*width` floats and `classes_out` room for `height*width` bytes.
 */
enum SdStatus sd_segmenter_predict(struct SdSegmenter *s,
                                   const uint8_t *rgb,
                                   const float *depth,
                                   size_t height,
                                   size_t width,
                                   uint8_t *classes_out);

/**
 * # Safety
 * `s` must be null or a handle from this library not yet freed.
 */
void sd_segmenter_free(struct SdSegmenter *s);

/**
 * Adds the confusion counts of `n` predicted/true label pairs to `counts`.
 *
 * # Safety
 * `pred` and `truth` must hold `n` bytes; `counts` must be writable.
 */
enum SdStatus sd_confusion_accumulate(const uint8_t *pred,
                                      const uint8_t *truth,
                                      size_t n,
                                      struct SdConfusion *counts);

/**
 * Building IoU, ground IoU and pixel accuracy of `counts`. An empty union
 * yields an IoU of 1.
 *
 * # Safety
 * All pointers must be valid; output pointers must be writable.
 */
enum SdStatus sd_metrics(const struct SdConfusion *counts,
                         double *iou_building,
                         double *iou_ground,
                         double *accuracy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SYNTHDEPTH_H */
