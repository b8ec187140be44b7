#ifndef EDS_H
#define EDS_H

#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum EdsStatus {
  EDS_STATUS_OK = 0,
  EDS_STATUS_NULL_POINTER = 1,
  EDS_STATUS_INVALID_UTF8 = 2,
  EDS_STATUS_IO = 3,
  EDS_STATUS_PARSE = 4,
  EDS_STATUS_INVALID_ARGUMENT = 5,
  // Bad magic, unsupported version or truncated binary file.
  EDS_STATUS_FORMAT = 6,
  EDS_STATUS_DIMENSION_MISMATCH = 7,
  EDS_STATUS_K_OUT_OF_RANGE = 8,
  EDS_STATUS_POOL_TOO_SMALL = 9,
  EDS_STATUS_UNKNOWN_ID = 10,
  EDS_STATUS_DUPLICATE_ID = 11,
  EDS_STATUS_EMPTY_INPUT = 12,
  EDS_STATUS_PANIC = 13,
} EdsStatus;

// Scenario axis selector for `eds_manifest_kl`.
typedef enum EdsAxis {
  EDS_AXIS_WEATHER = 0,
  EDS_AXIS_TIME = 1,
  EDS_AXIS_ROAD_TYPE = 2,
} EdsAxis;

typedef struct EdsClusterModel EdsClusterModel;

typedef struct EdsEmbeddings EdsEmbeddings;

typedef struct EdsManifest EdsManifest;

typedef struct EdsSegModel EdsSegModel;

typedef struct EdsSubset EdsSubset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into the library on the same thread.
const char *eds_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *eds_version(void);

// Loads and validates a dataset manifest.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum EdsStatus eds_manifest_load(const char *path, struct EdsManifest **out);

// Number of records, or 0 for a null handle.
//
// # Safety
// `m` must be null or a live manifest handle.
size_t eds_manifest_len(const struct EdsManifest *m);

// KL divergence to uniform of the scenario density along `axis`, over the
// subset's ids, or over the whole manifest when `subset` is null.
//
// # Safety
// `m` must be a live manifest handle, `subset` null or a live subset handle,
// `out` writable.
enum EdsStatus eds_manifest_kl(const struct EdsManifest *m,
                               const struct EdsSubset *subset,
                               enum EdsAxis axis,
                               double *out);

// # Safety
// `m` must be null or a handle not yet freed.
void eds_manifest_free(struct EdsManifest *m);

// Builds an embedding set from `count` row-major vectors of `dim` floats and
// `count` NUL-terminated ids.
//
// # Safety
// `values` must hold `count * dim` floats and `ids` `count` string pointers.
enum EdsStatus eds_embeddings_new(size_t count,
                                  size_t dim,
                                  const float *values,
                                  const char *const *ids,
                                  struct EdsEmbeddings **out);

// Reads an EDSE file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum EdsStatus eds_embeddings_read(const char *path, struct EdsEmbeddings **out);

// Writes an EDSE file.
//
// # Safety
// `set` must be a live handle and `path` a NUL-terminated string.
enum EdsStatus eds_embeddings_write(const struct EdsEmbeddings *set, const char *path);

// # Safety
// `set` must be null or a live handle.
size_t eds_embeddings_len(const struct EdsEmbeddings *set);

// # Safety
// `set` must be null or a live handle.
size_t eds_embeddings_dim(const struct EdsEmbeddings *set);

// # Safety
// `set` must be null or a handle not yet freed.
void eds_embeddings_free(struct EdsEmbeddings *set);

// k-means++ with Lloyd iterations; the best of `restarts` runs is kept.
//
// # Safety
// `set` must be a live handle; `out` must be writable.
enum EdsStatus eds_cluster_fit(const struct EdsEmbeddings *set,
                               size_t k,
                               size_t max_iter,
                               double tol,
                               uint64_t seed,
                               size_t restarts,
                               struct EdsClusterModel **out);

// Index of the nearest centroid of a `dim`-float vector.
//
// # Safety
// `model` must be a live handle, `values` must hold `dim` floats.
enum EdsStatus eds_cluster_assign(const struct EdsClusterModel *model,
                                  const float *values,
                                  size_t dim,
                                  size_t *out);

// # Safety
// `model` must be null or a live handle.
size_t eds_cluster_k(const struct EdsClusterModel *model);

// # Safety
// `model` must be null or a live handle.
double eds_cluster_inertia(const struct EdsClusterModel *model);

// Writes an EDSC file.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum EdsStatus eds_cluster_save(const struct EdsClusterModel *model, const char *path);

// Reads an EDSC file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum EdsStatus eds_cluster_load(const char *path, struct EdsClusterModel **out);

// # Safety
// `model` must be null or a handle not yet freed.
void eds_cluster_free(struct EdsClusterModel *model);

// Uniform per-cluster sample: `min(n, |C_i|)` ids per cluster plus refill up
// to `n * k` ids.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum EdsStatus eds_sample(const struct EdsClusterModel *model,
                          size_t n,
                          uint64_t seed,
                          struct EdsSubset **out);

// EDS sample truncated to exactly `min(budget, pool)` ids.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum EdsStatus eds_sample_budget(const struct EdsClusterModel *model,
                                 size_t budget,
                                 uint64_t seed,
                                 struct EdsSubset **out);

// # Safety
// `s` must be null or a live handle.
size_t eds_subset_len(const struct EdsSubset *s);

// The `i`-th sampled id, owned by the subset; null when out of range.
//
// # Safety
// `s` must be null or a live handle.
const char *eds_subset_id(const struct EdsSubset *s, size_t i);

// # Safety
// `s` must be null or a handle not yet freed.
void eds_subset_free(struct EdsSubset *s);

// KL divergence (natural log) of a probability vector to the uniform
// distribution over the same support.
//
// # Safety
// `probs` must hold `len` doubles; `out` must be writable.
enum EdsStatus eds_kl_to_uniform(const double *probs, size_t len, double *out);

// `base_lr * (1 - iter / total_iters)^power`.
double eds_poly_lr(size_t iter, size_t total_iters, double base_lr, double power);

// Reads an EDSM model file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum EdsStatus eds_model_load(const char *path, struct EdsSegModel **out);

// # Safety
// `model` must be null or a live handle.
size_t eds_model_num_classes(const struct EdsSegModel *model);

// Per-pixel argmax class of an interleaved RGB image into `out_mask`
// (`height * width` bytes).
//
// # Safety
// `rgb` must hold `3 * height * width` bytes and `out_mask` `height * width`.
enum EdsStatus eds_model_predict(const struct EdsSegModel *model,
                                 const uint8_t *rgb,
                                 size_t height,
                                 size_t width,
                                 uint8_t *out_mask);

// # Safety
// `model` must be null or a handle not yet freed.
void eds_model_free(struct EdsSegModel *model);

// Mean IoU of a predicted mask against ground truth (`len` bytes each,
// classes below `classes`). Classes absent from both are skipped; the result
// is 0 when no class is present.
//
// # Safety
// `pred` and `gt` must hold `len` bytes; `out` must be writable.
enum EdsStatus eds_miou(const uint8_t *pred,
                        const uint8_t *gt,
                        size_t len,
                        size_t classes,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDS_H */
