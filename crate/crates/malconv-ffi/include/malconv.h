/* C interface for the byte-level sequence classifier. */

#ifndef MALCONV_H
#define MALCONV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every API call.
 */
typedef enum McStatus {
  MC_OK = 0,
  /**
   * Invalid argument (null pointer, bad UTF-8 path, closed handle).
   */
  MC_ERR_INVALID_ARG = 1,
  /**
   * File could not be read.
   */
  MC_ERR_IO = 2,
  /**
   * Checkpoint malformed, corrupt, or of an unsupported version.
   */
  MC_ERR_FORMAT = 3,
  /**
   * A non-finite value was produced.
   */
  MC_ERR_NUMERIC = 4,
} McStatus;

/**
 * Opaque model handle.
 */
typedef struct McModel McModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a checkpoint file into a new model handle.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be a valid
 * pointer to receive the handle.
 */
enum McStatus mc_model_open(const char *path, struct McModel **out);

/**
 * Release a handle returned by `mc_model_open`. Null is a no-op.
 *
 * # Safety
 * `model` must be a handle from `mc_model_open` not yet closed.
 */
void mc_model_close(struct McModel *model);

/**
 * Score a byte buffer; writes the logit to `score`.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `score` must be writable.
 */
enum McStatus mc_predict_bytes(const struct McModel *model,
                               const uint8_t *data,
                               uintptr_t len,
                               float *score);

/**
 * Score a file without loading it into memory; writes the logit to
 * `score`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `score` must be writable.
 */
enum McStatus mc_predict_file(const struct McModel *model, const char *path, float *score);

/**
 * Copy the calling thread's last error message (NUL-terminated,
 * truncated to `buf_len`). Returns the full message length in bytes,
 * excluding the terminator.
 *
 * # Safety
 * `buf` must point to `buf_len` writable bytes, or be null with
 * `buf_len == 0`.
 */
uintptr_t mc_last_error_message(char *buf, uintptr_t buf_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MALCONV_H */
