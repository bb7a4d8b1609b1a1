#ifndef SLOWREGION_H
#define SLOWREGION_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SR_PROFILE_PAPER 0

#define SR_PROFILE_DESK 1

/**
 * Features from the last max-pool layer.
 */
#define SR_TAP_POOL 0

/**
 * Features from the final fully connected layer (the embedding).
 */
#define SR_TAP_FC 1

/**
 * Result of every fallible call.
 */
typedef enum {
  SR_STATUS_OK = 0,
  SR_STATUS_NULL_POINTER = 1,
  SR_STATUS_INVALID_ARGUMENT = 2,
  SR_STATUS_CONFIG = 3,
  SR_STATUS_IO = 4,
  SR_STATUS_RUNTIME = 5,
  SR_STATUS_PANIC = 6,
} SrStatus;

/**
 * A mined pair dataset.
 */
typedef struct SrDataset SrDataset;

/**
 * A network with f32 parameters.
 */
typedef struct SrNetwork SrNetwork;

/**
 * Pixel box, top-left anchored.
 */
typedef struct {
  uint32_t x;
  uint32_t y;
  uint32_t w;
  uint32_t h;
} SrBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sr_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into the library from this thread.
 */
const char *sr_last_error(void);

/**
 * Intersection over union of two boxes; 0 when both are empty.
 */
double sr_iou(SrBox a, SrBox b);

/**
 * Cosine distance `1 - cos` between two vectors of length `len`.
 *
 * # Safety
 * `a` and `b` must point to `len` readable doubles; `out` must be writable.
 */
SrStatus sr_cosine_distance(const double *a, const double *b, size_t len, double *out);

/**
 * Randomly initialised network for `profile`.
 *
 * # Safety
 * `out` must be writable.
 */
SrStatus sr_network_new(uint32_t profile, uint64_t seed, SrNetwork **out);

/**
 * Network stored in a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
SrStatus sr_network_load(const char *path, SrNetwork **out);

/**
 * # Safety
 * `net` must come from this library and not be used afterwards. Null is a no-op.
 */
void sr_network_free(SrNetwork *net);

/**
 * Side length of the square RGB crops the network takes.
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
SrStatus sr_network_input_size(const SrNetwork *net, uint32_t *out);

/**
 * Length of the feature vector read at `tap`.
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
SrStatus sr_network_feature_len(const SrNetwork *net, uint32_t tap, size_t *out);

/**
 * Features of one crop given as channel-major RGB bytes (`3 * s * s` of them,
 * `s` from [`sr_network_input_size`]). `out_len` must equal the feature length.
 *
 * # Safety
 * `crop` must hold `crop_len` bytes and `out` must hold `out_len` doubles.
 */
SrStatus sr_network_features(const SrNetwork *net,
                             uint32_t tap,
                             const uint8_t *crop,
                             size_t crop_len,
                             double *out,
                             size_t out_len);

/**
 * Mines region pairs from a corpus of frame directories with the defaults
 * of `profile`.
 *
 * # Safety
 * `corpus` must be a NUL-terminated string; `out` must be writable.
 */
SrStatus sr_dataset_mine(const char *corpus, uint32_t profile, uint64_t seed, SrDataset **out);

/**
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
SrStatus sr_dataset_load(const char *dir, SrDataset **out);

/**
 * # Safety
 * `ds` must be a live handle; `dir` a NUL-terminated string.
 */
SrStatus sr_dataset_save(const SrDataset *ds, const char *dir);

/**
 * Number of pairs.
 *
 * # Safety
 * `ds` must be a live handle; `out` must be writable.
 */
SrStatus sr_dataset_len(const SrDataset *ds, size_t *out);

/**
 * # Safety
 * `ds` must come from this library and not be used afterwards. Null is a no-op.
 */
void sr_dataset_free(SrDataset *ds);

/**
 * k nearest database rows by cosine distance for each query. Rows are
 * `dim` doubles, row-major. Writes `n_queries * k` indices and distances,
 * nearest first, ties broken by the lower index.
 *
 * # Safety
 * All pointers must hold the number of elements implied by the counts.
 */
SrStatus sr_retrieve(const double *queries,
                     size_t n_queries,
                     const double *database,
                     size_t n_database,
                     size_t dim,
                     size_t k,
                     size_t *out_indices,
                     double *out_distances);

/**
 * Runs the gradient check of `profile` and writes the largest relative
 * error. Returns `Ok` whenever the check ran, whether or not it passed.
 *
 * # Safety
 * `out_max_error` must be writable.
 */
SrStatus sr_gradcheck(uint32_t profile, uint64_t seed, double *out_max_error);

/**
 * Largest relative error at which [`sr_gradcheck`] counts as passing.
 */
double sr_gradcheck_tolerance(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLOWREGION_H */
