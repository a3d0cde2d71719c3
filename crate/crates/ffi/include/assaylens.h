#ifndef ASSAYLENS_H
#define ASSAYLENS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AlStatus {
  AL_STATUS_OK = 0,
  AL_STATUS_NULL_POINTER = 1,
  AL_STATUS_INVALID_ARGUMENT = 2,
  AL_STATUS_IMAGE = 3,
  /**
   * Zero denominator, saturated ROI or similar undefined reading.
   */
  AL_STATUS_DEGENERATE = 4,
  AL_STATUS_CALIBRATION = 5,
  AL_STATUS_NO_MATCH = 6,
  AL_STATUS_OUT_OF_RANGE = 7,
  AL_STATUS_IO = 8,
  AL_STATUS_PANIC = 9,
} AlStatus;

typedef enum AlChannel {
  AL_CHANNEL_RED = 0,
  AL_CHANNEL_GREEN = 1,
  AL_CHANNEL_BLUE = 2,
} AlChannel;

/**
 * Opaque calibration database.
 */
typedef struct AlDatabase AlDatabase;

/**
 * Opaque decoded RGB image.
 */
typedef struct AlImage AlImage;

typedef struct AlRoi {
  uint32_t x;
  uint32_t y;
  uint32_t w;
  uint32_t h;
} AlRoi;

typedef struct AlRoiStats {
  uint64_t pixel_count;
  /**
   * Per-channel sums, R, G, B.
   */
  double sum[3];
  double mean[3];
} AlRoiStats;

typedef struct AlLinearFit {
  /**
   * Reading units per decade of concentration.
   */
  double slope;
  double intercept;
  double r_squared;
} AlLinearFit;

/**
 * Capture conditions of a query. Strings are NUL-terminated UTF-8.
 */
typedef struct AlContext {
  const char *assay;
  const char *phone;
  const char *led_power;
  double temperature_c;
  double exposure_s;
  double iso;
  double aperture_f;
} AlContext;

typedef struct AlEstimate {
  double value;
  double lower;
  double upper;
  /**
   * Relative interval width in percent.
   */
  double measuring_error;
  double normalized_reading;
} AlEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *al_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the length the full message needs, including
 * the terminator; pass a null `buf` to query it.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t al_last_error_message(char *buf, size_t len);

/**
 * Decodes a PNG or JPEG file into 8-bit RGB.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AlStatus al_image_load(const char *path, struct AlImage **out);

/**
 * Builds an image from interleaved RGB bytes, row-major, `width * height * 3` long.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be writable.
 */
enum AlStatus al_image_from_rgb(uint32_t width,
                                uint32_t height,
                                const uint8_t *data,
                                size_t len,
                                struct AlImage **out);

/**
 * Releases an image. Null is ignored.
 *
 * # Safety
 * `image` must come from this library and not be used afterwards.
 */
void al_image_free(struct AlImage *image);

/**
 * Width in pixels, 0 for null.
 *
 * # Safety
 * `image` must be null or a live handle.
 */
uint32_t al_image_width(const struct AlImage *image);

/**
 * Height in pixels, 0 for null.
 *
 * # Safety
 * `image` must be null or a live handle.
 */
uint32_t al_image_height(const struct AlImage *image);

/**
 * Channel sums and means over `roi` of one image.
 *
 * # Safety
 * `image` must be a live handle; `out` must be writable.
 */
enum AlStatus al_roi_stats(const struct AlImage *image, struct AlRoi roi_, struct AlRoiStats *out);

/**
 * Statistics of the frame average of `count` equally sized images.
 *
 * # Safety
 * `images` must point to `count` live handles; `out` must be writable.
 */
enum AlStatus al_stack_roi_stats(const struct AlImage *const *images,
                                 size_t count,
                                 struct AlRoi roi_,
                                 struct AlRoiStats *out);

/**
 * Fraction of ROI pixels with any channel at 255.
 *
 * # Safety
 * `image` must be a live handle; `out` must be writable.
 */
enum AlStatus al_saturation_fraction(const struct AlImage *image, struct AlRoi roi_, double *out);

/**
 * Ratio of channel sums, `numerator / denominator`.
 *
 * # Safety
 * `stats` must be readable; `out` must be writable.
 */
enum AlStatus al_channel_ratio(const struct AlRoiStats *stats,
                               enum AlChannel numerator,
                               enum AlChannel denominator,
                               double *out);

/**
 * Mean of the three channel means.
 *
 * # Safety
 * `stats` must be readable; `out` must be writable.
 */
enum AlStatus al_grey_scale(const struct AlRoiStats *stats, double *out);

/**
 * Least-squares fit of `reading = intercept + slope * log10(concentration)`.
 *
 * # Safety
 * `concentrations` and `readings` must each point to `count` values.
 */
enum AlStatus al_fit_log_linear(const double *concentrations,
                                const double *readings,
                                size_t count,
                                struct AlLinearFit *out);

/**
 * `(max - min) / |mean| * 100` over replicate readings.
 *
 * # Safety
 * `values` must point to `count` values; `out` must be writable.
 */
enum AlStatus al_repeating_error(const double *values, size_t count, double *out);

/**
 * Loads a calibration database file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AlStatus al_database_load(const char *path, struct AlDatabase **out);

/**
 * Releases a database. Null is ignored.
 *
 * # Safety
 * `db` must come from this library and not be used afterwards.
 */
void al_database_free(struct AlDatabase *db);

/**
 * Number of records, 0 for null.
 *
 * # Safety
 * `db` must be null or a live handle.
 */
size_t al_database_len(const struct AlDatabase *db);

/**
 * Estimates a concentration for `reading` taken under `context` with
 * `approach` (`"G/B"`, `"grey"`, ...). `spread` is the ± reading error bar.
 * Exposure settings are normalized to the matched record rather than matched.
 *
 * # Safety
 * `db` must be a live handle, `context` readable with valid strings,
 * `approach` NUL-terminated, `out` writable.
 */
enum AlStatus al_database_estimate(const struct AlDatabase *db,
                                   const struct AlContext *context,
                                   const char *approach,
                                   double reading,
                                   double spread,
                                   struct AlEstimate *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ASSAYLENS_H */
