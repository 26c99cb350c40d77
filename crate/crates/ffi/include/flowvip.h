#ifndef FLOWVIP_H
#define FLOWVIP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum FvipStatus {
  FVIP_STATUS_OK = 0,
  FVIP_STATUS_NULL_POINTER = 1,
  FVIP_STATUS_INVALID_ARGUMENT = 2,
  FVIP_STATUS_SHAPE = 3,
  FVIP_STATUS_CONFIG = 4,
  FVIP_STATUS_DATA = 5,
  FVIP_STATUS_CHECKPOINT = 6,
  FVIP_STATUS_IO = 7,
  FVIP_STATUS_NON_FINITE = 8,
  FVIP_STATUS_INTERNAL = 9,
  FVIP_STATUS_PANIC = 10,
} FvipStatus;

/**
 * A generator restored from a training checkpoint.
 */
typedef struct FvipModel FvipModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fvip_version(void);

/**
 * Message of the most recent failure on the calling thread, or an empty
 * string. The pointer stays valid until the next failing call on the
 * same thread.
 */
const char *fvip_last_error(void);

/**
 * Load a generator from a checkpoint written by `flowvip train`. The
 * model configuration is read from the configuration stored in the file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FvipStatus fvip_model_load(const char *path, struct FvipModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`fvip_model_load`] and not be used afterwards.
 */
void fvip_model_free(struct FvipModel *model);

/**
 * Inpaint a whole video with the sliding-window schedule. Unmasked pixels
 * of `out` equal the input exactly.
 *
 * # Safety
 * `frames` and `out` must hold `t*h*w*3` values, `masks` `t*h*w` values.
 */
enum FvipStatus fvip_model_inpaint(const struct FvipModel *model,
                                   const double *frames,
                                   const double *masks,
                                   size_t t,
                                   size_t h,
                                   size_t w,
                                   double *out);

/**
 * Mean per-frame PSNR of two `[t, h, w, c]` videos in [0, 1].
 *
 * # Safety
 * `a` and `b` must hold `t*h*w*c` values; `out` must be valid.
 */
enum FvipStatus fvip_psnr(const double *a,
                          const double *b,
                          size_t t,
                          size_t h,
                          size_t w,
                          size_t c,
                          double *out);

/**
 * Mean per-frame SSIM of two `[t, h, w, c]` videos; frames must be at
 * least 11x11.
 *
 * # Safety
 * `a` and `b` must hold `t*h*w*c` values; `out` must be valid.
 */
enum FvipStatus fvip_ssim(const double *a,
                          const double *b,
                          size_t t,
                          size_t h,
                          size_t w,
                          size_t c,
                          double *out);

/**
 * Flow-warping error of a `[t, h, w, c]` video against full-resolution
 * forward and backward flows.
 *
 * # Safety
 * `video` must hold `t*h*w*c` values, each flow `(t-1)*h*w*2` values;
 * `out` must be valid.
 */
enum FvipStatus fvip_warp_error(const double *video,
                                size_t t,
                                size_t h,
                                size_t w,
                                size_t c,
                                const double *forward,
                                const double *backward,
                                double occlusion_threshold,
                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWVIP_H */
