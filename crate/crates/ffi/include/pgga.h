#ifndef PGGA_H
#define PGGA_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of keypoint heatmap channels.
 */
#define PGGA_NUM_PARTS 13

/**
 * Graph attention weights per image.
 */
#define PGGA_NUM_NODES 5

/**
 * Result codes.
 */
typedef enum PggaStatus {
  PGGA_STATUS_OK = 0,
  PGGA_STATUS_NULL_POINTER = 1,
  PGGA_STATUS_INVALID_ARGUMENT = 2,
  PGGA_STATUS_SHAPE = 3,
  PGGA_STATUS_CONFIG = 4,
  PGGA_STATUS_FORMAT = 5,
  PGGA_STATUS_IO = 6,
  PGGA_STATUS_NON_FINITE = 7,
  PGGA_STATUS_TRAIN_MODE = 8,
  PGGA_STATUS_BUFFER_TOO_SMALL = 9,
  PGGA_STATUS_PANIC = 10,
  PGGA_STATUS_INTERNAL = 11,
} PggaStatus;

/**
 * A trained model in eval mode together with its run config.
 */
typedef struct PggaModel PggaModel;

/**
 * Mask parameters: square half-width ω and weights α, β.
 */
typedef struct PggaMaskParams {
  size_t omega;
  double alpha;
  double beta;
} PggaMaskParams;

/**
 * Identity and camera labels of one side of a ranking problem.
 */
typedef struct PggaLabels {
  const size_t *ids;
  const size_t *cameras;
  size_t count;
} PggaLabels;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pgga_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next pgga call on the same thread.
 */
const char *pgga_last_error(void);

/**
 * Loads a checkpoint and the `<ckpt>.cfg` written beside it, ready for
 * descriptor extraction.
 *
 * # Safety
 * `ckpt_path` must be a NUL-terminated string; `out` must be valid for
 * one write. On success `*out` owns a handle for [`pgga_model_free`].
 */
enum PggaStatus pgga_model_load(const char *ckpt_path, struct PggaModel **out);

/**
 * Releases a handle from [`pgga_model_load`]; null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle, not used afterwards.
 */
void pgga_model_free(struct PggaModel *model);

/**
 * Input image size; heatmaps are `13 × (height/8) × (width/8)`.
 *
 * # Safety
 * `model` must be a live handle; `height` and `width` valid for writes.
 */
enum PggaStatus pgga_model_input_size(const struct PggaModel *model, size_t *height, size_t *width);

/**
 * Descriptor length `8·d`.
 *
 * # Safety
 * `model` must be a live handle; `len` valid for one write.
 */
enum PggaStatus pgga_model_descriptor_len(const struct PggaModel *model, size_t *len);

/**
 * Descriptors of `batch` images.
 *
 * `images` holds `batch × 3 × H × W` values in `[0,1]`, `heatmaps`
 * `batch × 13 × H/8 × W/8`. `descriptors` receives `batch × len` values
 * and `descriptors_cap` is its capacity. `thetas` may be null, otherwise
 * it receives `batch × 5` graph attention weights.
 *
 * # Safety
 * Every non-null pointer must be valid for the stated number of elements.
 */
enum PggaStatus pgga_model_extract(const struct PggaModel *model,
                                   const double *images,
                                   const double *heatmaps,
                                   size_t batch,
                                   double *descriptors,
                                   size_t descriptors_cap,
                                   double *thetas);

/**
 * Coarse body mask (`rows × cols`) of a `13 × rows × cols` heatmap.
 *
 * # Safety
 * `heatmap_data` must hold `13·rows·cols` values and `out` `rows·cols`.
 */
enum PggaStatus pgga_coarse_mask(const double *heatmap_data,
                                 size_t rows,
                                 size_t cols,
                                 struct PggaMaskParams params,
                                 double *out);

/**
 * The 13 fine keypoint masks (`13 × rows × cols`) of a heatmap.
 *
 * # Safety
 * `heatmap_data` and `out` must each hold `13·rows·cols` values.
 */
enum PggaStatus pgga_fine_masks(const double *heatmap_data,
                                size_t rows,
                                size_t cols,
                                struct PggaMaskParams params,
                                double *out);

/**
 * Euclidean distances `nq × ng` between the rows of `queries` (`nq × len`)
 * and `gallery` (`ng × len`).
 *
 * # Safety
 * Pointers must be valid for the stated sizes.
 */
enum PggaStatus pgga_distance_matrix(const double *queries,
                                     size_t nq,
                                     const double *gallery,
                                     size_t ng,
                                     size_t len,
                                     double *out);

/**
 * CMC curve up to `max_rank` into `curve`; `skipped` (may be null)
 * receives the number of queries without a valid match.
 *
 * # Safety
 * `distances` must hold `q.count × g.count` values, `curve` `max_rank`.
 */
enum PggaStatus pgga_cmc(const double *distances,
                         struct PggaLabels queries,
                         struct PggaLabels gallery,
                         size_t max_rank,
                         double *curve,
                         size_t *skipped);

/**
 * Mean average precision over queries with a valid match.
 *
 * # Safety
 * `distances` must hold `q.count × g.count` values; `map` valid for one
 * write.
 */
enum PggaStatus pgga_mean_ap(const double *distances,
                             struct PggaLabels queries,
                             struct PggaLabels gallery,
                             double *map);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PGGA_H */
