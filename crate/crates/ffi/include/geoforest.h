#ifndef GEOFOREST_H
#define GEOFOREST_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GfStatus {
  GF_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  GF_STATUS_NULL = 1,
  GF_STATUS_IO = 2,
  GF_STATUS_FORMAT = 3,
  GF_STATUS_SIZE = 4,
  GF_STATUS_PARAMETER = 5,
  GF_STATUS_GEOMETRY = 6,
  GF_STATUS_ANNOTATION = 7,
  GF_STATUS_MODEL = 8,
  GF_STATUS_DATASET = 9,
  /**
   * A string argument was not valid UTF-8.
   */
  GF_STATUS_UTF8 = 10,
  /**
   * The library panicked. This is a bug.
   */
  GF_STATUS_PANIC = 11,
} GfStatus;

/**
 * A trained forest.
 */
typedef struct GfForest GfForest;

/**
 * A label volume: 0 background, 1 right kidney, 2 left kidney.
 */
typedef struct GfLabels GfLabels;

/**
 * A scalar volume (CT or distance map).
 */
typedef struct GfVolume GfVolume;

/**
 * Parameters for [`gf_geodesic`]. Obtain defaults from
 * [`gf_geodesic_params_default`].
 */
typedef struct GfGeodesicParams {
  double gamma;
  /**
   * 6 or 26.
   */
  uint8_t connectivity;
  double d_cap;
  double window_lo;
  double window_hi;
  /**
   * Nonzero to divide by `d_cap` and clamp to 1.
   */
  uint8_t normalized;
} GfGeodesicParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * successful call. Valid until the next call into the library on the same
 * thread.
 */
const char *gf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gf_version(void);

/**
 * Reads a MetaImage volume (`.mhd` with its `.raw` payload).
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum GfStatus gf_volume_read(const char *path, struct GfVolume **out);

/**
 * Creates a volume by copying `len` values laid out x fastest.
 *
 * # Safety
 * `dims` and `spacing` must point to 3 values, `data` to `len` values.
 */
enum GfStatus gf_volume_new(const size_t *dims,
                            const double *spacing,
                            const double *data,
                            size_t len,
                            struct GfVolume **out);

/**
 * Writes `vol` as MetaImage; the payload goes next to the header.
 *
 * # Safety
 * `vol` must come from this library; `path` must be NUL-terminated.
 */
enum GfStatus gf_volume_write(const struct GfVolume *vol, const char *path);

/**
 * Copies `[nx, ny, nz]` into `out`.
 *
 * # Safety
 * `out` must have room for 3 values.
 */
enum GfStatus gf_volume_dims(const struct GfVolume *vol, size_t *out);

/**
 * Copies the voxel spacing in millimeters into `out`.
 *
 * # Safety
 * `out` must have room for 3 values.
 */
enum GfStatus gf_volume_spacing(const struct GfVolume *vol, double *out);

/**
 * Borrowed pointer to the voxel values, or null if `vol` is null.
 *
 * # Safety
 * The pointer is valid while `vol` is alive.
 */
const double *gf_volume_data(const struct GfVolume *vol);

/**
 * Number of voxels, or 0 if `vol` is null.
 *
 * # Safety
 * `vol` must be null or come from this library.
 */
size_t gf_volume_len(const struct GfVolume *vol);

/**
 * # Safety
 * `vol` must be null or come from this library, and not be used afterwards.
 */
void gf_volume_free(struct GfVolume *vol);

struct GfGeodesicParams gf_geodesic_params_default(void);

/**
 * Geodesic distance from the outline in `annotation_json` over the windowed
 * CT. `params` may be null for defaults.
 *
 * # Safety
 * `ct` must come from this library, `annotation_json` must be
 * NUL-terminated, `params` null or valid, and `out` writable.
 */
enum GfStatus gf_geodesic(const struct GfVolume *ct,
                          const char *annotation_json,
                          const struct GfGeodesicParams *params,
                          struct GfVolume **out);

/**
 * Loads a model written by `geoforest train`.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum GfStatus gf_forest_load(const char *path, struct GfForest **out);

/**
 * Number of trees, or 0 if `forest` is null.
 *
 * # Safety
 * `forest` must be null or come from this library.
 */
size_t gf_forest_num_trees(const struct GfForest *forest);

/**
 * # Safety
 * `forest` must be null or come from this library, and not be used afterwards.
 */
void gf_forest_free(struct GfForest *forest);

/**
 * Segments both kidneys in `ct` from their mid-slice outlines.
 *
 * `config_json` may be null, in which case default settings are used with
 * the channel layout the forest was trained on.
 *
 * # Safety
 * Handles must come from this library, strings must be NUL-terminated
 * (`config_json` may be null) and `out` must be writable.
 */
enum GfStatus gf_segment(const struct GfForest *forest,
                         const struct GfVolume *ct,
                         const char *right_json,
                         const char *left_json,
                         const char *config_json,
                         struct GfLabels **out);

/**
 * Reads a label volume stored as MetaImage.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum GfStatus gf_labels_read(const char *path, struct GfLabels **out);

/**
 * # Safety
 * `labels` must come from this library; `path` must be NUL-terminated.
 */
enum GfStatus gf_labels_write(const struct GfLabels *labels, const char *path);

/**
 * # Safety
 * `out` must have room for 3 values.
 */
enum GfStatus gf_labels_dims(const struct GfLabels *labels, size_t *out);

/**
 * Borrowed pointer to the labels, or null if `labels` is null.
 *
 * # Safety
 * The pointer is valid while `labels` is alive.
 */
const uint8_t *gf_labels_data(const struct GfLabels *labels);

/**
 * # Safety
 * `labels` must be null or come from this library.
 */
size_t gf_labels_len(const struct GfLabels *labels);

/**
 * # Safety
 * `labels` must be null or come from this library, and not be used afterwards.
 */
void gf_labels_free(struct GfLabels *labels);

/**
 * Dice overlap of `class_id` between two label volumes of equal size.
 *
 * # Safety
 * Handles must come from this library and `out` must be writable.
 */
enum GfStatus gf_dice(const struct GfLabels *pred,
                      const struct GfLabels *truth,
                      uint8_t class_id,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOFOREST_H */
