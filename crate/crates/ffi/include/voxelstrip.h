#ifndef VOXELSTRIP_H
#define VOXELSTRIP_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum VsStatus {
  VS_STATUS_OK = 0,
  VS_STATUS_NULL_POINTER = 1,
  VS_STATUS_INVALID_ARGUMENT = 2,
  VS_STATUS_IO = 3,
  VS_STATUS_FORMAT = 4,
  VS_STATUS_MODEL = 5,
  VS_STATUS_SHAPE = 6,
  VS_STATUS_EMPTY_MASK = 7,
  VS_STATUS_INTERNAL = 8,
} VsStatus;

/**
 * Opaque set of 1 to 5 trained networks.
 */
typedef struct VsEnsemble VsEnsemble;

/**
 * Opaque binary mask.
 */
typedef struct VsMask VsMask;

/**
 * Opaque scalar image.
 */
typedef struct VsVolume VsVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *vs_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *vs_version(void);

/**
 * Reads a `.nii` or `.nii.gz` image.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum VsStatus vs_volume_read(const char *path, struct VsVolume **out);

/**
 * Builds an axis-aligned volume from x-fastest `data` of
 * `dims[0] * dims[1] * dims[2]` values.
 *
 * # Safety
 * `dims` and `spacing` must point to 3 values, `data` to the full voxel
 * count, and `out` must be writable.
 */
enum VsStatus vs_volume_new(const size_t *dims,
                            const double *spacing,
                            const float *data,
                            struct VsVolume **out);

/**
 * Writes a volume as float32 NIfTI, gzip-compressed when `compress` is
 * non-zero.
 *
 * # Safety
 * `vol` must be a live handle and `path` a NUL-terminated string.
 */
enum VsStatus vs_volume_write(const struct VsVolume *vol, const char *path, int32_t compress);

/**
 * Copies the grid size into `dims[0..3]`.
 *
 * # Safety
 * `vol` must be a live handle and `dims` must hold 3 values.
 */
enum VsStatus vs_volume_dims(const struct VsVolume *vol, size_t *dims);

/**
 * Borrowed pointer to the x-fastest intensities, or null for a null
 * handle. Valid until the handle is freed.
 *
 * # Safety
 * `vol` must be null or a live handle.
 */
const float *vs_volume_data(const struct VsVolume *vol);

/**
 * # Safety
 * `vol` must be null or a handle not yet freed.
 */
void vs_volume_free(struct VsVolume *vol);

/**
 * Reads a mask; any non-zero voxel is foreground.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum VsStatus vs_mask_read(const char *path, struct VsMask **out);

/**
 * Writes a mask as uint8 NIfTI.
 *
 * # Safety
 * `mask` must be a live handle and `path` a NUL-terminated string.
 */
enum VsStatus vs_mask_write(const struct VsMask *mask, const char *path, int32_t compress);

/**
 * # Safety
 * `mask` must be a live handle and `dims` must hold 3 values.
 */
enum VsStatus vs_mask_dims(const struct VsMask *mask, size_t *dims);

/**
 * Borrowed pointer to the x-fastest 0/1 voxels, or null for a null handle.
 *
 * # Safety
 * `mask` must be null or a live handle.
 */
const uint8_t *vs_mask_data(const struct VsMask *mask);

/**
 * Foreground voxel count, 0 for a null handle.
 *
 * # Safety
 * `mask` must be null or a live handle.
 */
size_t vs_mask_count(const struct VsMask *mask);

/**
 * # Safety
 * `mask` must be null or a handle not yet freed.
 */
void vs_mask_free(struct VsMask *mask);

/**
 * Loads `n` weight files (each with its `.cfg` sidecar) as one ensemble.
 *
 * # Safety
 * `paths` must point to `n` NUL-terminated strings and `out` be writable.
 */
enum VsStatus vs_ensemble_load(const char *const *paths, size_t n, struct VsEnsemble **out);

/**
 * Member count, 0 for a null handle.
 *
 * # Safety
 * `ens` must be null or a live handle.
 */
size_t vs_ensemble_len(const struct VsEnsemble *ens);

/**
 * # Safety
 * `ens` must be null or a handle not yet freed.
 */
void vs_ensemble_free(struct VsEnsemble *ens);

/**
 * Full extraction pipeline on a native-space image. `tta` enables mirror
 * averaging; `nonzero_zscore` restricts normalisation statistics to
 * non-zero voxels. `prob` may be null; otherwise it receives the brain
 * probability map.
 *
 * # Safety
 * `ens` and `vol` must be live handles; `mask` must be writable.
 */
enum VsStatus vs_extract(const struct VsEnsemble *ens,
                         const struct VsVolume *vol,
                         int32_t tta,
                         int32_t nonzero_zscore,
                         struct VsMask **mask,
                         struct VsVolume **prob);

/**
 * DICE coefficient in percent.
 *
 * # Safety
 * `reference` and `prediction` must be live handles; `out` writable.
 */
enum VsStatus vs_dice(const struct VsMask *reference, const struct VsMask *prediction, double *out);

/**
 * Symmetric 95th-percentile surface distance in millimetres;
 * `VS_STATUS_EMPTY_MASK` when either mask is empty.
 *
 * # Safety
 * `reference` and `prediction` must be live handles; `out` writable.
 */
enum VsStatus vs_hd95(const struct VsMask *reference, const struct VsMask *prediction, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOXELSTRIP_H */
