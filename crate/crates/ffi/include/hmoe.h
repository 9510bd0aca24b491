#ifndef HMOE_H
#define HMOE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum HmoeStatus {
  HMOE_STATUS_OK = 0,
  HMOE_STATUS_NULL_POINTER = 1,
  HMOE_STATUS_INVALID_INPUT = 2,
  HMOE_STATUS_INVALID_MODEL = 3,
  HMOE_STATUS_FIT_FAILED = 4,
  HMOE_STATUS_QUADRATURE_ERROR = 5,
  HMOE_STATUS_UNSUPPORTED_CELL_SIZE = 6,
  HMOE_STATUS_CONFIG_ERROR = 7,
  HMOE_STATUS_IO_ERROR = 8,
  HMOE_STATUS_PANIC = 9,
} HmoeStatus;

typedef enum HmoeCombo {
  HMOE_COMBO_SS = 0,
  HMOE_COMBO_SL = 1,
  HMOE_COMBO_LL = 2,
} HmoeCombo;

// A dataset of `n` rows of `dim` inputs and one response.
typedef struct HmoeDataset HmoeDataset;

// A mixing measure tagged with its gating combination.
typedef struct HmoeMeasure HmoeMeasure;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next `hmoe_*` call on the same thread.
const char *hmoe_last_error(void);

// Library version as a static NUL-terminated string.
const char *hmoe_version(void);

// Frees a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void hmoe_string_free(char *s);

// Parses a measure from its JSON form (`combo`, `dim`, `groups`).
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum HmoeStatus hmoe_measure_from_json(const char *json, struct HmoeMeasure **out);

// The built-in two-group, two-expert truth used by rate experiments.
//
// # Safety
// `out` must be writable.
enum HmoeStatus hmoe_measure_default(enum HmoeCombo combo, struct HmoeMeasure **out);

// Serializes a measure to JSON. Free the result with `hmoe_string_free`.
//
// # Safety
// `m` must be a live handle; `out` must be writable.
enum HmoeStatus hmoe_measure_to_json(const struct HmoeMeasure *m, char **out);

// # Safety
// `m` must be NULL or a handle not freed before.
void hmoe_measure_free(struct HmoeMeasure *m);

// Input dimension of a measure.
//
// # Safety
// `m` must be a live handle; `out` must be writable.
enum HmoeStatus hmoe_measure_dim(const struct HmoeMeasure *m, uintptr_t *out);

// Conditional density `p(y | x)` under the measure's own gating combination.
//
// # Safety
// `x` must point to `dim` doubles; `out` must be writable.
enum HmoeStatus hmoe_measure_density(const struct HmoeMeasure *m,
                                     const double *x,
                                     uintptr_t dim,
                                     double y,
                                     double *out);

// Draws `n` rows from the measure with inputs uniform on `[-1, 1]^d`.
//
// # Safety
// `m` must be a live handle; `out` must be writable.
enum HmoeStatus hmoe_sample(const struct HmoeMeasure *m,
                            uintptr_t n,
                            uint64_t seed,
                            struct HmoeDataset **out);

// Builds a dataset from row-major inputs `x` (`n * dim`) and responses `y`.
//
// # Safety
// `x` must point to `n * dim` doubles and `y` to `n`; `out` must be writable.
enum HmoeStatus hmoe_dataset_new(const double *x,
                                 const double *y,
                                 uintptr_t n,
                                 uintptr_t dim,
                                 struct HmoeDataset **out);

// # Safety
// `d` must be a live handle; `out` must be writable.
enum HmoeStatus hmoe_dataset_len(const struct HmoeDataset *d, uintptr_t *out);

// # Safety
// `d` must be NULL or a handle not freed before.
void hmoe_dataset_free(struct HmoeDataset *d);

// Maximum-likelihood fit. `config_json` is a fit configuration object
// (`k1`, `k2`, and optional `restarts`, `max_iters`, `tol`, `init`, ...).
// Writes the normalized estimate and its mean log-likelihood.
//
// # Safety
// Pointers must be valid; `out_estimate` and `out_loglik` must be writable.
enum HmoeStatus hmoe_fit(const struct HmoeDataset *d,
                         enum HmoeCombo combo,
                         const char *config_json,
                         struct HmoeMeasure **out_estimate,
                         double *out_loglik);

// Probe average of the Hellinger distance between two measures under
// `combo`, over `probes` quasi-random inputs in `[-1, 1]^d`.
//
// # Safety
// Pointers must be valid; `out` must be writable.
enum HmoeStatus hmoe_hellinger(const struct HmoeMeasure *g1,
                               const struct HmoeMeasure *g2,
                               enum HmoeCombo combo,
                               uintptr_t probes,
                               double *out);

// Multi-start search for a non-trivial solution of the `(kind, m, r)`
// system in dimension 1. `found` is set to 1 when the scaled residual
// dropped below 1e-10.
//
// # Safety
// `found` and `best_residual` must be writable.
enum HmoeStatus hmoe_polysys_search(enum HmoeCombo kind,
                                    uintptr_t m,
                                    uintptr_t r,
                                    uintptr_t restarts,
                                    uint64_t seed,
                                    int32_t *found,
                                    double *best_residual);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HMOE_H */
