/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef D2IBC_H
#define D2IBC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum D2ibcStatus {
  D2IBC_STATUS_OK = 0,
  D2IBC_STATUS_NULL_POINTER = 1,
  D2IBC_STATUS_INVALID_ARGUMENT = 2,
  D2IBC_STATUS_IO = 3,
  D2IBC_STATUS_PARSE = 4,
  D2IBC_STATUS_CONFIG = 5,
  D2IBC_STATUS_SHAPE = 6,
  D2IBC_STATUS_NUMERIC = 7,
  D2IBC_STATUS_DIVERGENCE = 8,
  D2IBC_STATUS_ASSUMPTION_VIOLATION = 9,
  D2IBC_STATUS_INTERNAL = 10,
} D2ibcStatus;

typedef struct D2ibcCertificate D2ibcCertificate;

typedef struct D2ibcDataset D2ibcDataset;

typedef struct D2ibcModel D2ibcModel;

typedef struct D2ibcPid D2ibcPid;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *d2ibc_last_error(void);

/**
 * Frees a string returned by this library.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void d2ibc_string_free(char *s);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum D2ibcStatus d2ibc_dataset_load_csv(const char *path, struct D2ibcDataset **out);

/**
 * Writes the sample count and channel dimensions; any output may be null.
 *
 * # Safety
 * `d` is a live dataset handle.
 */
enum D2ibcStatus d2ibc_dataset_dims(const struct D2ibcDataset *d,
                                    size_t *len,
                                    size_t *n_u,
                                    size_t *n_y);

/**
 * # Safety
 * `d` comes from this library and is not used afterwards.
 */
void d2ibc_dataset_free(struct D2ibcDataset *d);

/**
 * Least-squares fit of a polynomial model of order `n` and total degree
 * `degree`. `rms_residual` (may be null) receives one value per output.
 *
 * # Safety
 * `d` is a live dataset; `rms_residual` holds `n_y` doubles when non-null.
 */
enum D2ibcStatus d2ibc_model_fit(const struct D2ibcDataset *d,
                                 size_t n,
                                 uint32_t degree,
                                 double ridge,
                                 double *rms_residual,
                                 struct D2ibcModel **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum D2ibcStatus d2ibc_model_load_json(const char *path, struct D2ibcModel **out);

/**
 * # Safety
 * `m` is a live model; `path` is a NUL-terminated string.
 */
enum D2ibcStatus d2ibc_model_save_json(const struct D2ibcModel *m, const char *path);

/**
 * Writes the order `n` and the input and output dimensions; any output may be null.
 *
 * # Safety
 * `m` is a live model handle.
 */
enum D2ibcStatus d2ibc_model_dims(const struct D2ibcModel *m, size_t *n, size_t *n_u, size_t *n_y);

/**
 * One-step prediction. `y_hist` holds `n*n_y` values (y_t first),
 * `u_hist` holds `(n-1)*n_u` values (u_{t-1} first), `u` holds `n_u`
 * and `y_next` receives `n_y`.
 *
 * # Safety
 * Array lengths as documented.
 */
enum D2ibcStatus d2ibc_model_predict(const struct D2ibcModel *m,
                                     const double *y_hist,
                                     const double *u_hist,
                                     const double *u,
                                     double *y_next);

/**
 * # Safety
 * `m` comes from this library and is not used afterwards.
 */
void d2ibc_model_free(struct D2ibcModel *m);

/**
 * Inversion input `u_nl` minimizing the normalized cost over
 * `[-u_bar, u_bar]^n_u`. Windows as in [`d2ibc_model_predict`];
 * `r_next` holds `n_y` values and `u_prev` `n_u`. `zeta` (`n_y`), `mu`
 * and `lambda` (`n_u` each) may be null for pure tracking; normalizers
 * are unit. `j_value` may be null.
 *
 * # Safety
 * Array lengths as documented.
 */
enum D2ibcStatus d2ibc_solve_inversion(const struct D2ibcModel *m,
                                       const double *y_hist,
                                       const double *u_hist,
                                       const double *r_next,
                                       const double *u_prev,
                                       double u_bar,
                                       const double *zeta,
                                       const double *mu,
                                       const double *lambda,
                                       double *u_nl,
                                       double *j_value);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum D2ibcStatus d2ibc_pid_load_json(const char *path, struct D2ibcPid **out);

/**
 * # Safety
 * `g` comes from this library and is not used afterwards.
 */
void d2ibc_pid_free(struct D2ibcPid *g);

/**
 * Certificate for the loop described by the TOML run configuration at
 * `config_path`. `data` (may be null) supplies the inversion normalizers.
 *
 * # Safety
 * Handles are live; `config_path` is a NUL-terminated string.
 */
enum D2ibcStatus d2ibc_certify_from_config(const char *config_path,
                                           const struct D2ibcModel *m,
                                           const struct D2ibcPid *g,
                                           const struct D2ibcDataset *data,
                                           struct D2ibcCertificate **out);

/**
 * Writes the assumption verdict (1 holds, 0 fails).
 *
 * # Safety
 * `c` is a live certificate; `verdict` is writable.
 */
enum D2ibcStatus d2ibc_certificate_verdict(const struct D2ibcCertificate *c, int32_t *verdict);

/**
 * Writes the tracking error bound; fails with
 * `D2IBC_STATUS_ASSUMPTION_VIOLATION` when no bound exists.
 *
 * # Safety
 * `c` is a live certificate; `e_bar` is writable.
 */
enum D2ibcStatus d2ibc_certificate_e_bar(const struct D2ibcCertificate *c, double *e_bar);

/**
 * Certificate JSON; release with [`d2ibc_string_free`].
 *
 * # Safety
 * `c` is a live certificate; `out` is writable.
 */
enum D2ibcStatus d2ibc_certificate_to_json(const struct D2ibcCertificate *c, char **out);

/**
 * # Safety
 * `c` comes from this library and is not used afterwards.
 */
void d2ibc_certificate_free(struct D2ibcCertificate *c);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* D2IBC_H */
