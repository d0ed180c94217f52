/* SPDX-License-Identifier: Apache-2.0 */
/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef GAPLANES_H
#define GAPLANES_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GpStatus {
  GP_STATUS_OK = 0,
  GP_STATUS_NULL_POINTER = 1,
  GP_STATUS_INVALID_ARGUMENT = 2,
  GP_STATUS_SHAPE = 3,
  GP_STATUS_MODEL = 4,
  GP_STATUS_NUMERICS = 5,
  GP_STATUS_TRAINING = 6,
  GP_STATUS_IO = 7,
  GP_STATUS_PANIC = 8,
} GpStatus;

typedef enum GpInterp {
  GP_INTERP_NEAREST = 0,
  GP_INTERP_MULTILINEAR = 1,
} GpInterp;

typedef enum GpDecoder {
  GP_DECODER_LINEAR = 0,
  GP_DECODER_MLP = 1,
  GP_DECODER_GATED = 2,
  GP_DECODER_FUSED = 3,
} GpDecoder;

typedef enum GpMode {
  GP_MODE_NONCONVEX = 0,
  GP_MODE_SEMICONVEX = 1,
  GP_MODE_CONVEX = 2,
} GpMode;

/*
 Opaque model handle.
 */
typedef struct GpModel GpModel;

/*
 Training settings for `gp_model_fit_points`.
 */
typedef struct GpTrainOptions {
  size_t steps;
  size_t batch_size;
  double lr_grids;
  double lr_decoder;
  uint64_t seed;
} GpTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buf` (NUL-terminated,
 truncated to `len`) and returns the full message length in bytes.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t gp_last_error(char *buf, size_t len);

/*
 Builds a 2D model with `k` features per grid, line resolution `r1` and
 plane resolution `r2`.

 # Safety
 `expr` must be a NUL-terminated string and `out` a valid pointer.
 */
enum GpStatus gp_model_plane(const char *expr,
                             size_t k,
                             size_t r1,
                             size_t r2,
                             enum GpInterp interp,
                             enum GpDecoder decoder,
                             size_t hidden,
                             bool use_bias,
                             uint64_t seed,
                             struct GpModel **out);

/*
 Builds a 3D model; `d` and `r` hold line, plane and volume feature dims
 and resolutions.

 # Safety
 `expr` must be a NUL-terminated string, `d` and `r` must point to three
 values each and `out` must be a valid pointer.
 */
enum GpStatus gp_model_volume(const char *expr,
                              const size_t *d,
                              const size_t *r,
                              enum GpMode mode,
                              size_t hidden,
                              uint64_t seed,
                              struct GpModel **out);

/*
 Releases a model. Null is ignored.

 # Safety
 `model` must come from this library and not be used afterwards.
 */
void gp_model_free(struct GpModel *model);

/*
 Input dimension (2 or 3).

 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum GpStatus gp_model_dims(const struct GpModel *model, size_t *out);

/*
 Parameter count; frozen gate copies are included when `include_frozen`.

 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum GpStatus gp_model_param_count(const struct GpModel *model, bool include_frozen, size_t *out);

/*
 Predicts at `n` points stored row-major in `coords` (`n * dims` values in
 `[0, 1]`), writing `n` values to `out`.

 # Safety
 `coords` must hold `n * dims` values and `out` room for `n`.
 */
enum GpStatus gp_model_predict(const struct GpModel *model,
                               const double *coords_in,
                               size_t n,
                               double *out);

/*
 Fits the model to `n` point samples with Adam and writes the final
 full-data MSE to `final_loss` (may be null).

 # Safety
 `coords` must hold `n * dims` values, `targets` `n` values and `opts` must
 be a valid pointer.
 */
enum GpStatus gp_model_fit_points(struct GpModel *model,
                                  const double *coords_in,
                                  const double *targets,
                                  size_t n,
                                  const struct GpTrainOptions *opts,
                                  double *final_loss);

/*
 Writes the `rows x cols` matrix a 2D model takes at grid nodes, row-major.

 # Safety
 `out` must have room for `rows * cols` values.
 */
enum GpStatus gp_model_assemble(const struct GpModel *model, size_t rows, size_t cols, double *out);

/*
 Number of singular values above `rel_tol` times the largest.

 # Safety
 `data` must hold `rows * cols` row-major values and `out` be valid.
 */
enum GpStatus gp_numeric_rank(const double *data,
                              size_t rows,
                              size_t cols,
                              double rel_tol,
                              size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAPLANES_H */
