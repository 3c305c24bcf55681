#ifndef VOXDIFF_H
#define VOXDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum VoxdiffStatus {
  VOXDIFF_STATUS_OK = 0,
  VOXDIFF_STATUS_NULL_POINTER = 1,
  VOXDIFF_STATUS_INVALID_ARGUMENT = 2,
  VOXDIFF_STATUS_IO = 3,
  VOXDIFF_STATUS_FORMAT = 4,
  VOXDIFF_STATUS_DIM_MISMATCH = 5,
  VOXDIFF_STATUS_NUMERIC = 6,
  VOXDIFF_STATUS_EMPTY_SHAPE = 7,
  VOXDIFF_STATUS_INCOMPLETE_SESSION = 8,
  VOXDIFF_STATUS_INTERNAL = 99,
} VoxdiffStatus;

/**
 * Trained denoiser together with the schedule it was trained on.
 */
typedef struct VoxdiffDenoiser VoxdiffDenoiser;

/**
 * Voxel grid handle.
 */
typedef struct VoxdiffGrid VoxdiffGrid;

/**
 * Schedule handle.
 */
typedef struct VoxdiffSchedule VoxdiffSchedule;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *voxdiff_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *voxdiff_version(void);

/**
 * Linear variance schedule with `steps` entries.
 *
 * # Safety
 * `out_schedule` must be a valid pointer.
 */
enum VoxdiffStatus voxdiff_schedule_linear(size_t steps,
                                           double beta_start,
                                           double beta_end,
                                           struct VoxdiffSchedule **out_schedule);

/**
 * Cumulative signal fraction at 1-based step `t`.
 *
 * # Safety
 * `schedule` must come from `voxdiff_schedule_linear`; `out_value` valid.
 */
enum VoxdiffStatus voxdiff_schedule_alpha_bar(const struct VoxdiffSchedule *schedule,
                                              size_t t,
                                              double *out_value);

/**
 * # Safety
 * `schedule` must be NULL or a handle not yet freed.
 */
void voxdiff_schedule_free(struct VoxdiffSchedule *schedule);

/**
 * Binary grid from one byte per cell (nonzero = occupied), x-fastest.
 *
 * # Safety
 * `dims` points to 3 values; `cells` to their product.
 */
enum VoxdiffStatus voxdiff_grid_from_occupancy(const size_t *dims,
                                               const uint8_t *cells,
                                               struct VoxdiffGrid **out_grid);

/**
 * Reads an ICVX grid file.
 *
 * # Safety
 * `path` is a NUL-terminated UTF-8 string; `out_grid` valid.
 */
enum VoxdiffStatus voxdiff_grid_read(const char *path, struct VoxdiffGrid **out_grid);

/**
 * Writes a grid as ICVX.
 *
 * # Safety
 * `grid` is a live handle; `path` NUL-terminated UTF-8.
 */
enum VoxdiffStatus voxdiff_grid_write(const struct VoxdiffGrid *grid, const char *path);

/**
 * Writes the three extents to `out_dims`.
 *
 * # Safety
 * `grid` is a live handle; `out_dims` holds 3 values.
 */
enum VoxdiffStatus voxdiff_grid_dims(const struct VoxdiffGrid *grid, size_t *out_dims);

/**
 * Copies cell values (x-fastest) into `buf`, which must hold exactly the
 * cell count.
 *
 * # Safety
 * `grid` is a live handle; `buf` holds `len` floats.
 */
enum VoxdiffStatus voxdiff_grid_values(const struct VoxdiffGrid *grid, float *buf, size_t len);

/**
 * Number of occupied cells.
 *
 * # Safety
 * `grid` is a live handle; `out_count` valid.
 */
enum VoxdiffStatus voxdiff_grid_occupied(const struct VoxdiffGrid *grid, size_t *out_count);

/**
 * # Safety
 * `grid` must be NULL or a handle not yet freed.
 */
void voxdiff_grid_free(struct VoxdiffGrid *grid);

/**
 * Chamfer distance between surface samples of two binary grids, each
 * canonically normalized.
 *
 * # Safety
 * Handles are live; `out_value` valid.
 */
enum VoxdiffStatus voxdiff_chamfer(const struct VoxdiffGrid *a,
                                   const struct VoxdiffGrid *b,
                                   size_t points,
                                   uint64_t seed,
                                   double *out_value);

/**
 * Volumetric IoU and surface F-score at threshold `tau`.
 *
 * # Safety
 * Handles are live; output pointers valid.
 */
enum VoxdiffStatus voxdiff_iou_fscore(const struct VoxdiffGrid *pred,
                                      const struct VoxdiffGrid *gt,
                                      double tau,
                                      double *out_iou,
                                      double *out_fscore);

/**
 * Spherical interpolation of two `dim`-vectors, written unit-norm to `out_vec`.
 *
 * # Safety
 * `a`, `b`, `out_vec` each hold `dim` doubles.
 */
enum VoxdiffStatus voxdiff_slerp(const double *a,
                                 const double *b,
                                 size_t dim,
                                 double lambda,
                                 double *out_vec);

/**
 * Loads a denoiser checkpoint and the schedule in its `.json` sidecar
 * (default toy schedule when the sidecar is absent).
 *
 * # Safety
 * `path` NUL-terminated UTF-8; `out_net` valid.
 */
enum VoxdiffStatus voxdiff_denoiser_load(const char *path, struct VoxdiffDenoiser **out_net);

/**
 * Embedding and auxiliary-vector sizes the denoiser expects, and its grid edge.
 *
 * # Safety
 * `net` live; outputs valid.
 */
enum VoxdiffStatus voxdiff_denoiser_dims(const struct VoxdiffDenoiser *net,
                                         size_t *out_cisp_dim,
                                         size_t *out_ec_dim,
                                         size_t *out_grid);

/**
 * Draws one binary grid. A NULL `cisp` or `ec` selects that stream's null
 * token; both NULL is unconditional sampling (single pass per step).
 *
 * # Safety
 * `net` live; non-NULL vectors hold the advertised lengths; `out_grid` valid.
 */
enum VoxdiffStatus voxdiff_sample(const struct VoxdiffDenoiser *net,
                                  const double *cisp,
                                  size_t cisp_len,
                                  const double *ec,
                                  size_t ec_len,
                                  double w,
                                  uint64_t seed,
                                  struct VoxdiffGrid **out_grid);

/**
 * # Safety
 * `net` must be NULL or a handle not yet freed.
 */
void voxdiff_denoiser_free(struct VoxdiffDenoiser *net);

/**
 * Tallies a vote log into a JSON report. Release the string with
 * `voxdiff_string_free`.
 *
 * # Safety
 * Paths NUL-terminated UTF-8; `out_json` valid.
 */
enum VoxdiffStatus voxdiff_tally_json(const char *pairs_path,
                                      const char *key_path,
                                      const char *votes_path,
                                      char **out_json);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library, not yet freed.
 */
void voxdiff_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOXDIFF_H */
