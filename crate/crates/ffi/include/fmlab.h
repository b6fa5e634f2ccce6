#ifndef FMLAB_H
#define FMLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FmlStatus {
  FML_STATUS_OK = 0,
  FML_STATUS_NULL_POINTER = 1,
  FML_STATUS_INVALID_ARGUMENT = 2,
  FML_STATUS_DIMENSION = 3,
  FML_STATUS_NON_FINITE = 4,
  FML_STATUS_IO = 5,
  FML_STATUS_PARSE = 6,
  FML_STATUS_STIFFNESS = 7,
  FML_STATUS_UNSUPPORTED = 8,
  FML_STATUS_CERTIFICATE = 9,
  FML_STATUS_BOUND_VIOLATION = 10,
  FML_STATUS_PANIC = 11,
} FmlStatus;

typedef enum FmlMethod {
  FML_METHOD_EULER = 0,
  FML_METHOD_RK4 = 1,
  FML_METHOD_DOPRI5 = 2,
} FmlMethod;

/**
 * A loaded flow model: a base field and an optional residual stage.
 */
typedef struct FmlField FmlField;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *fml_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *fml_version(void);

/**
 * Load a checkpoint, optionally stacked with a residual checkpoint
 * (`residual_path` may be null).
 *
 * # Safety
 * Paths must be valid nul-terminated strings; `out` must be writable.
 */
enum FmlStatus fml_field_load(const char *base_path,
                              const char *residual_path,
                              struct FmlField **out);

/**
 * Release a handle; null is ignored.
 *
 * # Safety
 * `field` must come from [`fml_field_load`] and not be used afterwards.
 */
void fml_field_free(struct FmlField *field);

/**
 * State dimension, or 0 for a null handle.
 *
 * # Safety
 * `field` must be null or a live handle.
 */
size_t fml_field_dim(const struct FmlField *field);

/**
 * Evaluate the base field at `(t, x)`; `x` and `out` hold `dim` values.
 *
 * # Safety
 * Pointers must be valid for `dim` doubles.
 */
enum FmlStatus fml_field_eval(const struct FmlField *field, double t, const double *x, double *out);

/**
 * Integrate `n` starting points (row-major `n × dim`) through the whole
 * model. `steps` is used by fixed-step methods, `rtol`/`atol` by dopri5.
 * Writes final states to `out` and the mean NFE per sample to `mean_nfe`.
 *
 * # Safety
 * `x0` and `out` must hold `n × dim` doubles; `mean_nfe` may be null.
 */
enum FmlStatus fml_field_integrate(const struct FmlField *field,
                                   const double *x0,
                                   size_t n,
                                   enum FmlMethod method,
                                   size_t steps,
                                   double rtol,
                                   double atol,
                                   double *out,
                                   double *mean_nfe);

/**
 * Largest eigenvalue of a symmetric `n × n` matrix.
 *
 * # Safety
 * `a` must hold `n × n` doubles; `out` must be writable.
 */
enum FmlStatus fml_sym_eig_max(const double *a, size_t n, double *out);

/**
 * Minimum-cost assignment for an `n × n` cost matrix: `perm[i]` is the
 * column assigned to row `i`.
 *
 * # Safety
 * `cost` must hold `n × n` doubles and `perm` `n` entries.
 */
enum FmlStatus fml_solve_assignment(const double *cost, size_t n, size_t *perm);

/**
 * Exact 2-Wasserstein distance between two `m × d` point sets.
 *
 * # Safety
 * `a` and `b` must hold `m × d` doubles; `out` must be writable.
 */
enum FmlStatus fml_wasserstein2(const double *a, const double *b, size_t m, size_t d, double *out);

/**
 * Variable-step error bound over the `n` steps in `taus`.
 *
 * # Safety
 * `taus` must hold `n` doubles; `out` must be writable.
 */
enum FmlStatus fml_bound_variable_step(double l_u,
                                       double delta,
                                       double m,
                                       double eps0,
                                       const double *taus,
                                       size_t n,
                                       double *out);

/**
 * Uniform-step error bound on `[0, 1]` with step `tau0`.
 *
 * # Safety
 * `out` must be writable.
 */
enum FmlStatus fml_bound_uniform_step(double l_u,
                                      double delta,
                                      double m,
                                      double eps0,
                                      double tau0,
                                      double *out);

/**
 * `λ_ω · ReLU(ω)` for one square `n × n` matrix.
 *
 * # Safety
 * `a` must hold `n × n` doubles; `out` must be writable.
 */
enum FmlStatus fml_dominance_penalty(const double *a,
                                     size_t n,
                                     double eps_a,
                                     double lambda_omega,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FMLAB_H */
