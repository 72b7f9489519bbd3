#ifndef SNE_FFI_H
#define SNE_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum SneStatus {
  SNE_STATUS_OK = 0,
  SNE_STATUS_NULL_POINTER = 1,
  SNE_STATUS_INVALID_INPUT = 2,
  SNE_STATUS_IO = 3,
  SNE_STATUS_PARSE = 4,
  SNE_STATUS_NUMERICAL = 5,
  SNE_STATUS_CHECKPOINT = 6,
  SNE_STATUS_PANIC = 7,
} SneStatus;

/**
 * Normal estimation method for [`sne_estimate_normals`].
 */
typedef enum SneMethod {
  SNE_METHOD_PCA = 0,
  SNE_METHOD_JET = 1,
  SNE_METHOD_MODEL = 2,
} SneMethod;

/**
 * Opaque point cloud.
 */
typedef struct SneCloud SneCloud;

/**
 * Opaque trained model.
 */
typedef struct SneModel SneModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sne_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length in
 * bytes, excluding the terminator. Empty after a successful call.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t sne_last_error_message(char *buf, size_t len);

/**
 * Builds a cloud from `count` points and optional unit normals (may be null).
 *
 * # Safety
 * `points` (and `normals`, if non-null) must hold `3 * count` doubles;
 * `out` must be a valid pointer.
 */
enum SneStatus sne_cloud_new(const double *points,
                             const double *normals,
                             size_t count,
                             struct SneCloud **out);

/**
 * Loads an `.xyz` file, with ground-truth normals from `normals_path` if
 * it is non-null.
 *
 * # Safety
 * Paths must be null or NUL-terminated; `out` must be a valid pointer.
 */
enum SneStatus sne_cloud_load(const char *xyz_path,
                              const char *normals_path,
                              struct SneCloud **out);

/**
 * Number of points, or 0 for a null handle.
 *
 * # Safety
 * `cloud` must be null or a live handle.
 */
size_t sne_cloud_len(const struct SneCloud *cloud);

/**
 * Copies the cloud's ground-truth normals into `out` (`3 * len` doubles).
 *
 * # Safety
 * `cloud` must be a live handle; `out` must hold `3 * len` doubles.
 */
enum SneStatus sne_cloud_normals(const struct SneCloud *cloud, double *out);

/**
 * Releases a cloud. Null is ignored.
 *
 * # Safety
 * `cloud` must be null or a handle not yet freed.
 */
void sne_cloud_free(struct SneCloud *cloud);

/**
 * Loads a checkpoint and its configuration sidecar.
 *
 * # Safety
 * `checkpoint_path` must be NUL-terminated; `out` must be a valid pointer.
 */
enum SneStatus sne_model_load(const char *checkpoint_path, struct SneModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void sne_model_free(struct SneModel *model);

/**
 * Estimates a normal at every point with `k`-point patches. `jet_order` is
 * used only by [`SneMethod::Jet`], `model` only by [`SneMethod::Model`]
 * (null otherwise is fine).
 *
 * # Safety
 * `cloud` must be a live handle, `model` null or live, and `out` must hold
 * `3 * len` doubles.
 */
enum SneStatus sne_estimate_normals(const struct SneCloud *cloud,
                                    enum SneMethod method,
                                    size_t jet_order,
                                    const struct SneModel *model,
                                    size_t k,
                                    double *out);

/**
 * Unoriented angular RMSE in degrees between `count` predicted and
 * ground-truth normals.
 *
 * # Safety
 * Both arrays must hold `3 * count` doubles; `out_degrees` must be valid.
 */
enum SneStatus sne_rmse_degrees(const double *predicted,
                                const double *ground_truth,
                                size_t count,
                                double *out_degrees);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SNE_FFI_H */
