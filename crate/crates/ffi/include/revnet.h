#ifndef REVNET_H
#define REVNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define REVNET_ABI_VERSION 1

typedef enum RevnetStatus {
  REVNET_STATUS_OK = 0,
  REVNET_STATUS_NULL_POINTER = 1,
  REVNET_STATUS_INVALID_ARGUMENT = 2,
  REVNET_STATUS_CONFIG = 3,
  REVNET_STATUS_SHAPE = 4,
  REVNET_STATUS_IO = 5,
  REVNET_STATUS_NON_FINITE = 6,
  REVNET_STATUS_INTERNAL = 7,
  REVNET_STATUS_PANIC = 8,
} RevnetStatus;

// Opaque network handle.
typedef struct RevnetNetwork RevnetNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

uint32_t revnet_abi_version(void);

// Message for the last failed call on this thread, or an empty string.
// The pointer stays valid until the next call on this thread.
const char *revnet_last_error(void);

// Builds a network from `key = value` config text. `config` may be empty for
// the built-in toy network. The precision key is ignored; handles are f64.
//
// # Safety
// `config` must be a NUL-terminated string and `out` a valid pointer.
enum RevnetStatus revnet_network_from_config(const char *config, struct RevnetNetwork **out);

// # Safety
// `net` must come from [`revnet_network_from_config`] and not be used afterwards. Null is a no-op.
void revnet_network_free(struct RevnetNetwork *net);

// # Safety
// `net` and `out` must be valid pointers.
enum RevnetStatus revnet_network_param_count(const struct RevnetNetwork *net, size_t *out);

// Mean cross-entropy of one batch and, when `grad` is non-null, its gradient
// flattened in parameter order into `grad[0..grad_len]`. `x` is NCHW with
// `batch` samples; `grad_len` must equal the parameter count.
//
// # Safety
// Pointers must be valid for the stated lengths (`labels` for `batch` entries).
enum RevnetStatus revnet_network_loss_and_grad(struct RevnetNetwork *net,
                                               const double *x,
                                               size_t x_len,
                                               const uint32_t *labels,
                                               size_t batch,
                                               double *loss,
                                               double *grad,
                                               size_t grad_len);

// One SGD step on a batch with the configured engine and schedule.
// Writes the pre-update loss to `loss` when non-null.
//
// # Safety
// Same as [`revnet_network_loss_and_grad`].
enum RevnetStatus revnet_network_train_step(struct RevnetNetwork *net,
                                            const double *x,
                                            size_t x_len,
                                            const uint32_t *labels,
                                            size_t batch,
                                            double *loss);

// Writes an f64 checkpoint of the current parameters.
//
// # Safety
// `net` must be valid and `path` NUL-terminated.
enum RevnetStatus revnet_network_save_checkpoint(const struct RevnetNetwork *net, const char *path);

// Angle in degrees between two vectors of length `len`.
//
// # Safety
// `a` and `b` must be valid for `len` reads and `out` for one write.
enum RevnetStatus revnet_grad_angle(const double *a, const double *b, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REVNET_H */
