#ifndef BNN_H
#define BNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum BnnStatus {
  BNN_STATUS_OK = 0,
  BNN_STATUS_NULL_POINTER = 1,
  BNN_STATUS_INVALID_ARGUMENT = 2,
  BNN_STATUS_IO = 3,
  BNN_STATUS_FORMAT = 4,
  BNN_STATUS_CONFIG = 5,
  BNN_STATUS_DATA = 6,
  BNN_STATUS_INTERNAL = 7,
  BNN_STATUS_BUFFER_TOO_SMALL = 8,
  BNN_STATUS_PANIC = 9,
} BnnStatus;

/**
 * A loaded model. Opaque to C.
 */
typedef struct BnnModel BnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum BnnStatus bnn_model_load(const char *path, struct BnnModel **out);

/**
 * Decodes a model from `len` bytes at `data` into `*out`.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` must be writable.
 */
enum BnnStatus bnn_model_load_bytes(const uint8_t *data, size_t len, struct BnnModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void bnn_model_free(struct BnnModel *model);

/**
 * Writes the model to `path`; with `packed` nonzero binary-weight layers
 * are stored one bit per weight.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum BnnStatus bnn_model_save(const struct BnnModel *model, const char *path, bool packed);

/**
 * Serialized size of the model in bytes, written to `*len`.
 *
 * # Safety
 * `model` must be a live handle and `len` writable.
 */
enum BnnStatus bnn_model_encoded_len(const struct BnnModel *model, bool packed, size_t *len);

/**
 * Serializes the model into `buf` of `cap` bytes.
 *
 * # Safety
 * `model` must be a live handle and `buf` must have `cap` writable bytes.
 */
enum BnnStatus bnn_model_encode(const struct BnnModel *model,
                                bool packed,
                                uint8_t *buf,
                                size_t cap);

/**
 * Creates a packed copy of `model` in `*out`.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum BnnStatus bnn_model_pack(const struct BnnModel *model, struct BnnModel **out);

/**
 * Input width, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t bnn_model_input_dim(const struct BnnModel *model);

/**
 * Number of classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t bnn_model_output_dim(const struct BnnModel *model);

/**
 * Number of layers, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t bnn_model_layer_count(const struct BnnModel *model);

/**
 * Whether the handle holds a packed model (as loaded, not derived).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
bool bnn_model_is_packed(const struct BnnModel *model);

/**
 * Class posteriors for `x` (`x_len` features) into `out` (`out_len` floats).
 *
 * # Safety
 * `model` must be a live handle, `x` must have `x_len` readable floats and
 * `out` `out_len` writable floats.
 */
enum BnnStatus bnn_model_infer(const struct BnnModel *model,
                               const float *x,
                               size_t x_len,
                               float *out,
                               size_t out_len);

/**
 * Most likely class for `x` into `*class_out`.
 *
 * # Safety
 * `model` must be a live handle, `x` must have `x_len` readable floats and
 * `class_out` must be writable.
 */
enum BnnStatus bnn_model_predict(const struct BnnModel *model,
                                 const float *x,
                                 size_t x_len,
                                 size_t *class_out);

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *bnn_last_error_message(void);

/**
 * Static name of a status code.
 */
const char *bnn_status_string(enum BnnStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BNN_H */
