#ifndef MX_FFI_H
#define MX_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define MX_FMT_E4M3 0

#define MX_FMT_E5M2 1

#define MX_FMT_E2M3 2

#define MX_FMT_E3M2 3

#define MX_FMT_E2M1 4

#define MX_FMT_INT8 5

#define MX_ROUND_NEAREST_EVEN 0

#define MX_ROUND_HALF_AWAY 1

/**
 * Result code of every fallible call.
 */
typedef enum MxStatus {
  MX_STATUS_OK = 0,
  MX_STATUS_NULL_POINTER = 1,
  MX_STATUS_INVALID_ARGUMENT = 2,
  MX_STATUS_SHAPE_MISMATCH = 3,
  MX_STATUS_IO = 4,
  MX_STATUS_FORMAT = 5,
  MX_STATUS_BUFFER_TOO_SMALL = 6,
  MX_STATUS_UNREPRESENTABLE = 7,
  MX_STATUS_PANIC = 8,
} MxStatus;

/**
 * Opaque MX tensor.
 */
typedef struct MxTensorHandle MxTensorHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *mx_last_error(void);

/**
 * Decodes one element code.
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum MxStatus mx_decode_element(uint32_t format, uint8_t code, double *out);

/**
 * Encodes one value to the nearest element code.
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum MxStatus mx_encode_element(uint32_t format, double value, uint32_t rounding, uint8_t *out);

/**
 * `2^(code - 127)`, or NaN for code 255.
 */
double mx_decode_scale(uint8_t code);

/**
 * Quantizes a row-major FP32 tensor along `axis`.
 *
 * # Safety
 * `data` must hold the product of `shape[0..rank]` floats, `shape` must hold
 * `rank` entries and `out` must be valid for one write.
 */
enum MxStatus mx_quantize(const float *data,
                          const size_t *shape,
                          size_t rank,
                          size_t axis,
                          uint32_t format,
                          size_t block_size,
                          uint32_t rounding,
                          struct MxTensorHandle **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `h` must come from this library and not be used afterwards.
 */
void mx_tensor_free(struct MxTensorHandle *h);

/**
 * Rank of the tensor, or 0 for a null handle.
 *
 * # Safety
 * `h` must be a live handle or null.
 */
size_t mx_tensor_rank(const struct MxTensorHandle *h);

/**
 * Number of logical (non-padding) values, or 0 for a null handle.
 *
 * # Safety
 * `h` must be a live handle or null.
 */
size_t mx_tensor_len(const struct MxTensorHandle *h);

/**
 * Number of MX blocks, or 0 for a null handle.
 *
 * # Safety
 * `h` must be a live handle or null.
 */
size_t mx_tensor_num_blocks(const struct MxTensorHandle *h);

/**
 * Block size `k`, or 0 for a null handle.
 *
 * # Safety
 * `h` must be a live handle or null.
 */
size_t mx_tensor_block_size(const struct MxTensorHandle *h);

/**
 * Copies the shape into `out` (`cap` entries).
 *
 * # Safety
 * `h` must be a live handle; `out` must be valid for `cap` writes.
 */
enum MxStatus mx_tensor_shape(const struct MxTensorHandle *h, size_t *out, size_t cap);

/**
 * Copies one E8M0 code per block into `out`.
 *
 * # Safety
 * `h` must be a live handle; `out` must be valid for `cap` writes.
 */
enum MxStatus mx_tensor_scales(const struct MxTensorHandle *h, uint8_t *out, size_t cap);

/**
 * Copies every element code, padding lanes included (`num_blocks * block_size`).
 *
 * # Safety
 * `h` must be a live handle; `out` must be valid for `cap` writes.
 */
enum MxStatus mx_tensor_codes(const struct MxTensorHandle *h, uint8_t *out, size_t cap);

/**
 * Writes the dequantized tensor, row-major, into `out`.
 *
 * # Safety
 * `h` must be a live handle; `out` must be valid for `cap` writes.
 */
enum MxStatus mx_tensor_dequantize(const struct MxTensorHandle *h, float *out, size_t cap);

/**
 * `[M,K] × [K,N]` over two MX tensors scaled along K. Writes `M·N` floats.
 *
 * # Safety
 * `a`, `b` must be live handles; `out` must be valid for `cap` writes.
 */
enum MxStatus mx_gemm_f32(const struct MxTensorHandle *a,
                          const struct MxTensorHandle *b,
                          float *out,
                          size_t cap);

/**
 * Saves the tensor as an MXT file.
 *
 * # Safety
 * `h` must be a live handle; `path` a NUL-terminated string.
 */
enum MxStatus mx_tensor_write(const struct MxTensorHandle *h, const char *path);

/**
 * Loads an MXT file into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for one write.
 */
enum MxStatus mx_tensor_read(const char *path, struct MxTensorHandle **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MX_FFI_H */
