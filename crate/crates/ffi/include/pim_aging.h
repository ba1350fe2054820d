#ifndef PIM_AGING_H
#define PIM_AGING_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call. Zero is success.
 */
typedef enum PimStatus {
  PIM_STATUS_OK = 0,
  PIM_STATUS_NULL_POINTER = 1,
  PIM_STATUS_INVALID_UTF8 = 2,
  PIM_STATUS_IO = 3,
  PIM_STATUS_CORRUPT_FILE = 4,
  PIM_STATUS_DIMENSION = 5,
  PIM_STATUS_INVALID_ARGUMENT = 6,
  PIM_STATUS_BUFFER_TOO_SMALL = 7,
  PIM_STATUS_PANIC = 8,
  PIM_STATUS_OTHER = 9,
} PimStatus;

/**
 * Simulator mode selector for [`pim_forward`].
 */
typedef enum PimMode {
  PIM_MODE_BITEXACT = 0,
  PIM_MODE_FUNCTIONAL = 1,
} PimMode;

/**
 * Opaque aging-mask handle.
 */
typedef struct PimMask PimMask;

/**
 * Opaque network handle.
 */
typedef struct PimNetwork PimNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next failing call on the same thread.
 */
const char *pim_last_error(void);

/**
 * Load a `.ckpt` file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PimStatus pim_network_load(const char *path, struct PimNetwork **out);

/**
 * # Safety
 * `net` must come from [`pim_network_load`] and not be freed twice. NULL is ignored.
 */
void pim_network_free(struct PimNetwork *net);

/**
 * Input and output widths of a network.
 *
 * # Safety
 * `net` must be a live handle; output pointers must be writable.
 */
enum PimStatus pim_network_dims(const struct PimNetwork *net, size_t *inputs, size_t *outputs);

/**
 * Generate an independent-plane aging mask matching `net`'s layers.
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum PimStatus pim_mask_generate(const struct PimNetwork *net,
                                 double sigma,
                                 double alpha,
                                 uint64_t seed,
                                 struct PimMask **out);

/**
 * Load a `.mask` file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PimStatus pim_mask_load(const char *path, struct PimMask **out);

/**
 * Write a mask to a `.mask` file.
 *
 * # Safety
 * `mask` must be a live handle; `path` a NUL-terminated string.
 */
enum PimStatus pim_mask_save(const struct PimMask *mask, const char *path);

/**
 * # Safety
 * `mask` must come from this library and not be freed twice. NULL is ignored.
 */
void pim_mask_free(struct PimMask *mask);

/**
 * Integer class scores for `batch` rows of `features` pixels in `[0, 1]`,
 * written row-major into `scores` (capacity `scores_len`). A NULL `mask`
 * simulates an unaged (unauthorized) chip. Default array and ADC parameters.
 *
 * # Safety
 * `pixels` must hold `batch * features` floats and `scores` `scores_len` slots.
 */
enum PimStatus pim_forward(const struct PimNetwork *net,
                           const struct PimMask *mask,
                           enum PimMode mode,
                           const float *pixels,
                           size_t batch,
                           size_t features,
                           int64_t *scores,
                           size_t scores_len);

/**
 * Base-2 exponent of the exhaustive mask-search cost. Both counts must be >= 1.
 *
 * # Safety
 * `out` must be writable.
 */
enum PimStatus pim_security_complexity(uint64_t cells, uint64_t levels, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PIM_AGING_H */
