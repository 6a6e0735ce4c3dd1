#ifndef AR_H
#define AR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every exported function.
 */
typedef enum ar_status {
  AR_STATUS_OK = 0,
  AR_STATUS_NULL_POINTER = 1,
  AR_STATUS_INVALID_ARGUMENT = 2,
  AR_STATUS_IO = 3,
  AR_STATUS_NOT_INITIALIZED = 4,
  AR_STATUS_DIMENSION_MISMATCH = 5,
  AR_STATUS_NUMERICAL = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  AR_STATUS_INTERNAL = 7,
} ar_status;

/**
 * Opaque scholar handle.
 */
typedef struct ar_scholar ar_scholar;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ar_last_error(void);

/**
 * Library version as a static string.
 */
const char *ar_version(void);

/**
 * Creates an untrained scholar with `k` components (a perfect square) and
 * otherwise default settings.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum ar_status ar_scholar_new(size_t k,
                              size_t dim,
                              size_t num_classes,
                              uint64_t seed,
                              struct ar_scholar **out);

/**
 * Overrides the epoch budgets of the first task and of replay stages.
 *
 * # Safety
 * `h` must be a live handle.
 */
enum ar_status ar_scholar_set_epochs(struct ar_scholar *h,
                                     size_t initial_epochs,
                                     size_t replay_epochs);

/**
 * Loads a checkpoint written by `ar_scholar_save` or the `ar` tool.
 *
 * # Safety
 * `path` must be a NUL-terminated string, `out` writable.
 */
enum ar_status ar_scholar_load(const char *path, struct ar_scholar **out);

/**
 * # Safety
 * `h` must be a live handle and `path` a NUL-terminated string.
 */
enum ar_status ar_scholar_save(const struct ar_scholar *h, const char *path);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `h` must be NULL or a handle not yet freed.
 */
void ar_scholar_free(struct ar_scholar *h);

/**
 * # Safety
 * `h` must be a live handle.
 */
size_t ar_scholar_dim(const struct ar_scholar *h);

/**
 * # Safety
 * `h` must be a live handle.
 */
size_t ar_scholar_k(const struct ar_scholar *h);

/**
 * Fits the first task: `n` images of `dim` floats with their labels.
 *
 * # Safety
 * `images` must hold `n * dim` floats and `labels` `n` values.
 */
enum ar_status ar_scholar_initial_fit(struct ar_scholar *h,
                                      const float *images,
                                      const uint32_t *labels,
                                      size_t n);

/**
 * Learns a new task with constant-time replay. `generated` (may be NULL)
 * receives the number of replayed variants.
 *
 * # Safety
 * As for `ar_scholar_initial_fit`; `generated` is NULL or writable.
 */
enum ar_status ar_scholar_update(struct ar_scholar *h,
                                 const float *images,
                                 const uint32_t *labels,
                                 size_t n,
                                 size_t *generated);

/**
 * Predicts a label for each of `n` images into `out`.
 *
 * # Safety
 * `images` must hold `n * dim` floats, `out` room for `n` labels.
 */
enum ar_status ar_scholar_classify(const struct ar_scholar *h,
                                   const float *images,
                                   size_t n,
                                   uint32_t *out);

/**
 * Mean negative log-likelihood of `n` images under the mixture.
 *
 * # Safety
 * `images` must hold `n * dim` floats, `out` must be writable.
 */
enum ar_status ar_scholar_mean_nll(const struct ar_scholar *h,
                                   const float *images,
                                   size_t n,
                                   double *out);

/**
 * Draws `per_query` variants for each of `n` queries into `out`, grouped by
 * query (`n * per_query * dim` floats).
 *
 * # Safety
 * `queries` must hold `n * dim` floats and `out` room for the variants.
 */
enum ar_status ar_scholar_generate(const struct ar_scholar *h,
                                   const float *queries,
                                   size_t n,
                                   size_t per_query,
                                   uint64_t seed,
                                   float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AR_H */
