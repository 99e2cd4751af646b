#ifndef LATENT_VL_H
#define LATENT_VL_H

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LvStatus {
  LV_STATUS_OK = 0,
  LV_STATUS_NULL_POINTER = 1,
  LV_STATUS_INVALID_UTF8 = 2,
  LV_STATUS_CONFIG = 3,
  /**
   * Bad shape, index or argument.
   */
  LV_STATUS_ARGUMENT = 4,
  LV_STATUS_IO = 5,
  /**
   * Malformed or corrupt file contents.
   */
  LV_STATUS_FORMAT = 6,
  LV_STATUS_NUMERIC = 7,
  LV_STATUS_DATASET = 8,
  /**
   * A training stage aborted.
   */
  LV_STATUS_TRAINING = 9,
  /**
   * The output buffer is too small; the required length was written.
   */
  LV_STATUS_BUFFER_TOO_SMALL = 10,
  LV_STATUS_PANIC = 11,
} LvStatus;

typedef struct LvConfig LvConfig;

typedef struct LvDataset LvDataset;

typedef struct LvModel LvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *lv_last_error(void);

/**
 * Static, NUL-terminated crate version.
 */
const char *lv_version(void);

/**
 * Built-in configuration, `"toy"` or `"paper"`.
 *
 * # Safety
 * `name` is a NUL-terminated string; `out` is writable.
 */
enum LvStatus lv_config_preset(const char *name, struct LvConfig **out);

/**
 * Configuration from TOML text.
 *
 * # Safety
 * `toml` is a NUL-terminated string; `out` is writable.
 */
enum LvStatus lv_config_from_toml(const char *toml, struct LvConfig **out);

/**
 * # Safety
 * `cfg` is a live handle.
 */
enum LvStatus lv_config_set_seed(struct LvConfig *cfg, uint64_t seed);

/**
 * Sets the epoch count of all four stages.
 *
 * # Safety
 * `cfg` is a live handle.
 */
enum LvStatus lv_config_set_epochs(struct LvConfig *cfg, size_t epochs);

/**
 * # Safety
 * `cfg` is null or a handle not yet freed.
 */
void lv_config_free(struct LvConfig *cfg);

/**
 * `count` examples of the configured family under `seed`.
 *
 * # Safety
 * `cfg` is a live handle; `out` is writable.
 */
enum LvStatus lv_dataset_generate(const struct LvConfig *cfg,
                                  size_t count,
                                  uint64_t seed,
                                  struct LvDataset **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum LvStatus lv_dataset_load(const char *path, struct LvDataset **out);

/**
 * # Safety
 * `ds` is a live handle; `path` is a NUL-terminated string.
 */
enum LvStatus lv_dataset_save(const struct LvDataset *ds, const char *path);

/**
 * Number of examples; 0 for a null handle.
 *
 * # Safety
 * `ds` is null or a live handle.
 */
size_t lv_dataset_len(const struct LvDataset *ds);

/**
 * # Safety
 * `ds` is null or a handle not yet freed.
 */
void lv_dataset_free(struct LvDataset *ds);

/**
 * Freshly initialised model. The config is copied.
 *
 * # Safety
 * `cfg` is a live handle; `out` is writable.
 */
enum LvStatus lv_model_new(const struct LvConfig *cfg, struct LvModel **out);

/**
 * Trains stages I to IV on `ds`. When `out_dir` is non-null, checkpoints and
 * metrics are written there.
 *
 * # Safety
 * `model` and `ds` are live handles; `out_dir` is null or a NUL-terminated
 * string.
 */
enum LvStatus lv_model_train(struct LvModel *model,
                             const struct LvDataset *ds,
                             const char *out_dir);

/**
 * Writes the parameters to a checkpoint file.
 *
 * # Safety
 * `model` is a live handle; `path` is a NUL-terminated string.
 */
enum LvStatus lv_model_save(const struct LvModel *model, const char *path);

/**
 * Replaces the parameters with those of a checkpoint file.
 *
 * # Safety
 * `model` is a live handle; `path` is a NUL-terminated string.
 */
enum LvStatus lv_model_load(struct LvModel *model, const char *path);

/**
 * Fraction of examples whose generated answer matches.
 *
 * # Safety
 * `model` and `ds` are live handles; `out` is writable.
 */
enum LvStatus lv_model_accuracy(const struct LvModel *model,
                                const struct LvDataset *ds,
                                double *out);

/**
 * Greedy generation for example `index`. The token count goes to `len`;
 * when it exceeds `cap`, nothing is copied and `BufferTooSmall` is returned.
 *
 * # Safety
 * `model` and `ds` are live handles; `ids` holds `cap` elements or is null
 * with `cap == 0`; `len` is writable.
 */
enum LvStatus lv_model_generate(const struct LvModel *model,
                                const struct LvDataset *ds,
                                size_t index,
                                uint32_t *ids,
                                size_t cap,
                                size_t *len);

/**
 * Thought chain for example `index`, row-major `[k x d]`. Same buffer
 * protocol as [`lv_model_generate`] with `k * d` values.
 *
 * # Safety
 * `model` and `ds` are live handles; `values` holds `cap` elements or is
 * null with `cap == 0`; `k` and `d` are writable.
 */
enum LvStatus lv_model_thoughts(const struct LvModel *model,
                                const struct LvDataset *ds,
                                size_t index,
                                double *values,
                                size_t cap,
                                size_t *k,
                                size_t *d);

/**
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void lv_model_free(struct LvModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATENT_VL_H */
