#ifndef ONLINENORM_H
#define ONLINENORM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum OnrmStatus {
  ONRM_STATUS_OK = 0,
  ONRM_STATUS_NULL_POINTER = 1,
  ONRM_STATUS_INVALID_ARGUMENT = 2,
  ONRM_STATUS_SHAPE = 3,
  ONRM_STATUS_NON_FINITE = 4,
  /**
   * Backward without a matching forward call.
   */
  ONRM_STATUS_HANDSHAKE = 5,
  ONRM_STATUS_DECODE = 6,
  /**
   * The output buffer is too small; the required size was written.
   */
  ONRM_STATUS_BUFFER_TOO_SMALL = 7,
  ONRM_STATUS_PANIC = 8,
} OnrmStatus;

/**
 * Opaque layer handle.
 */
typedef struct OnrmNorm OnrmNorm;

/**
 * Layer settings. Obtain defaults from [`onrm_default_config`].
 */
typedef struct OnrmConfig {
  double alpha_f;
  double alpha_b;
  double sigma_floor;
  bool layer_scaling;
  bool affine;
  bool grad_rescale;
} OnrmConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *onrm_last_error(void);

struct OnrmConfig onrm_default_config(void);

/**
 * Creates a layer over `features` channels. `config` may be NULL for the
 * defaults. On success `*out` owns a handle to release with [`onrm_free`].
 *
 * # Safety
 * `config` must be NULL or point to a valid `OnrmConfig`; `out` must be a
 * valid pointer to writable storage.
 */
enum OnrmStatus onrm_new(size_t features, const struct OnrmConfig *config, struct OnrmNorm **out);

/**
 * # Safety
 * `h` must be NULL or a handle from [`onrm_new`] that has not been freed.
 */
void onrm_free(struct OnrmNorm *h);

/**
 * Restores the initial statistics and clears any pending forward call.
 *
 * # Safety
 * `h` must be a live handle.
 */
enum OnrmStatus onrm_reset(struct OnrmNorm *h);

/**
 * Feature count of the layer, or 0 for a NULL handle.
 *
 * # Safety
 * `h` must be NULL or a live handle.
 */
size_t onrm_features(const struct OnrmNorm *h);

/**
 * Training-mode forward of one sample laid out feature-major
 * (`features * spatial` values). Advances the running statistics.
 *
 * # Safety
 * `h` must be a live handle; `x` and `out` must each hold
 * `features * spatial` doubles.
 */
enum OnrmStatus onrm_forward(struct OnrmNorm *h,
                             const double *x,
                             size_t features,
                             size_t spatial,
                             double *out);

/**
 * Gradient for the most recent forward call; exactly one per forward.
 *
 * # Safety
 * As for [`onrm_forward`].
 */
enum OnrmStatus onrm_backward(struct OnrmNorm *h,
                              const double *grad,
                              size_t features,
                              size_t spatial,
                              double *out);

/**
 * Inference with frozen statistics; the state is not modified.
 *
 * # Safety
 * As for [`onrm_forward`].
 */
enum OnrmStatus onrm_infer(struct OnrmNorm *h,
                           const double *x,
                           size_t features,
                           size_t spatial,
                           double *out);

/**
 * Copies the running mean and variance (`len` must equal the feature
 * count). Either output may be NULL.
 *
 * # Safety
 * `h` must be a live handle; non-NULL outputs must hold `len` doubles.
 */
enum OnrmStatus onrm_get_stats(const struct OnrmNorm *h, double *mean, double *var, size_t len);

/**
 * Writes the state record into `buf`. `*written` receives the record size;
 * when `buf` is NULL or `cap` is too small nothing is copied and
 * `ONRM_STATUS_BUFFER_TOO_SMALL` is returned.
 *
 * # Safety
 * `h` must be a live handle, `written` writable, and `buf` NULL or
 * writable for `cap` bytes.
 */
enum OnrmStatus onrm_serialize(const struct OnrmNorm *h, uint8_t *buf, size_t cap, size_t *written);

/**
 * Replaces the layer's streaming state with a record from
 * [`onrm_serialize`]. Affine parameters are untouched.
 *
 * # Safety
 * `h` must be a live handle and `bytes` readable for `len` bytes.
 */
enum OnrmStatus onrm_load_state(struct OnrmNorm *h, const uint8_t *bytes, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ONLINENORM_H */
