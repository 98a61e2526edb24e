#ifndef TARGET_BATCHER_H
#define TARGET_BATCHER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum TbStatus {
  TB_STATUS_OK = 0,
  TB_STATUS_NULL_POINTER = 1,
  TB_STATUS_INVALID_UTF8 = 2,
  TB_STATUS_INVALID_CONFIG = 3,
  TB_STATUS_MODEL_LOAD = 4,
  TB_STATUS_INVALID_REQUEST = 5,
  TB_STATUS_INTERNAL = 6,
} TbStatus;

/**
 * Opaque batcher handle.
 */
typedef struct TbBatcher TbBatcher;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a batcher. `config_toml` and `models_dir` may be null. With no
 * models, every batch falls back to the configured default size.
 *
 * # Safety
 * String arguments must be null or NUL-terminated. `out` must be a valid
 * pointer; on success it receives a handle to release with
 * [`tb_batcher_free`].
 */
enum TbStatus tb_batcher_new(const char *config_toml,
                             const char *models_dir,
                             struct TbBatcher **out);

/**
 * Releases a batcher. Null is ignored.
 *
 * # Safety
 * `handle` must be null or come from [`tb_batcher_new`], and must not be
 * used afterwards.
 */
void tb_batcher_free(struct TbBatcher *handle);

/**
 * Whether the batcher was created with trained models.
 *
 * # Safety
 * `handle` must be null or a live handle.
 */
bool tb_batcher_has_models(const struct TbBatcher *handle);

/**
 * Groups and batches one request. On success `*out_json` holds a
 * JSON array of batches, to release with [`tb_string_free`].
 *
 * # Safety
 * `handle` must be a live handle, `request_json` NUL-terminated, and
 * `out_json` a valid pointer.
 */
enum TbStatus tb_batch_targets_json(const struct TbBatcher *handle,
                                    const char *request_json,
                                    char **out_json);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void tb_string_free(char *s);

/**
 * The last error on this thread, or null. Valid until the next call into
 * this library on the same thread; do not free.
 */
const char *tb_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tb_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TARGET_BATCHER_H */
