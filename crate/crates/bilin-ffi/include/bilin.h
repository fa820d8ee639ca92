#ifndef BILIN_H
#define BILIN_H

/* Generated by cbindgen from crates/bilin-ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BilinStatus {
  BILIN_STATUS_OK = 0,
  BILIN_STATUS_NULL_POINTER = 1,
  BILIN_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Data unusable: rank-deficient W0, noise bound inconsistent with the data, bad dimensions.
   */
  BILIN_STATUS_DATA_ERROR = 3,
  /**
   * No grid point of the design program was feasible.
   */
  BILIN_STATUS_INFEASIBLE = 4,
  BILIN_STATUS_SOLVER_FAILURE = 5,
  BILIN_STATUS_IO = 6,
  BILIN_STATUS_PARSE = 7,
  BILIN_STATUS_PANIC = 8,
} BilinStatus;

typedef enum BilinProgram {
  /**
   * Known ū, continuous time.
   */
  BILIN_PROGRAM_KNOWN_CT = 0,
  /**
   * Known ū, discrete time.
   */
  BILIN_PROGRAM_KNOWN_DT = 1,
} BilinProgram;

/**
 * Set of system matrices consistent with a dataset.
 */
typedef struct BilinConsistencySet BilinConsistencySet;

/**
 * Synthesized state-feedback controller with its Lyapunov certificate.
 */
typedef struct BilinController BilinController;

/**
 * Noisy input-state dataset.
 */
typedef struct BilinDataset BilinDataset;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. The pointer stays valid until the next
 * failing call on the same thread.
 */
const char *bilin_last_error(void);

/**
 * Build a dataset from column-major X1 (n×T), X0 (n×T), U0 (m×T) and the n×n noise bound ΞΞᵀ.
 */
enum BilinStatus bilin_dataset_new(size_t n,
                                   size_t m,
                                   size_t t,
                                   const double *x1,
                                   const double *x0,
                                   const double *u0,
                                   const double *noise_bound,
                                   struct BilinDataset **out);

/**
 * Load a dataset written by `bilin collect`.
 */
enum BilinStatus bilin_dataset_from_json(const char *json, struct BilinDataset **out);

void bilin_dataset_free(struct BilinDataset *ds);

enum BilinStatus bilin_consistency_build(const struct BilinDataset *ds,
                                         struct BilinConsistencySet **out);

void bilin_consistency_free(struct BilinConsistencySet *cs);

/**
 * Shape of the parameter matrix Z = [A B C d]ᵀ: rows = n + m + mn + 1, cols = n.
 */
enum BilinStatus bilin_consistency_shape(const struct BilinConsistencySet *cs,
                                         size_t *rows,
                                         size_t *cols);

/**
 * Test whether the column-major Z lies in the consistency set.
 */
enum BilinStatus bilin_consistency_contains(const struct BilinConsistencySet *cs,
                                            const double *z,
                                            size_t rows,
                                            size_t cols,
                                            bool *member);

/**
 * Design for a known equilibrium (x̄, ū) with a line search over `lambdas`.
 */
enum BilinStatus bilin_synthesize_known(const struct BilinConsistencySet *cs,
                                        enum BilinProgram program,
                                        const double *xbar,
                                        const double *ubar,
                                        const double *lambdas,
                                        size_t n_lambdas,
                                        struct BilinController **out);

/**
 * Continuous-time design when ū is unknown: ū and γ are estimated first, then a grid over
 * (λ, s) is searched. The closed loop converges to a neighbourhood of x̄ of relative size η.
 */
enum BilinStatus bilin_synthesize_unknown(const struct BilinConsistencySet *cs,
                                          const double *xbar,
                                          double eta,
                                          double eps,
                                          const double *lambdas,
                                          size_t n_lambdas,
                                          const double *ss,
                                          size_t n_ss,
                                          struct BilinController **out);

void bilin_controller_free(struct BilinController *c);

/**
 * State dimension n and input dimension m of the controller.
 */
enum BilinStatus bilin_controller_shape(const struct BilinController *c, size_t *n, size_t *m);

/**
 * Copy the m×n gain K (column-major) into `buf`, which must hold at least m·n values.
 */
enum BilinStatus bilin_controller_gain(const struct BilinController *c, double *buf, size_t len);

/**
 * Copy the n×n Lyapunov shape P (column-major) into `buf`.
 */
enum BilinStatus bilin_controller_lyapunov(const struct BilinController *c,
                                           double *buf,
                                           size_t len);

/**
 * Serialize the controller to JSON. Release the string with [`bilin_string_free`].
 */
enum BilinStatus bilin_controller_to_json(const struct BilinController *c, char **out);

void bilin_string_free(char *s);

/**
 * Sample the Lyapunov decrease condition over the consistency set; writes the number of
 * violating samples.
 */
enum BilinStatus bilin_verify_certificate(const struct BilinConsistencySet *cs,
                                          const struct BilinController *c,
                                          size_t samples,
                                          uint64_t seed,
                                          size_t *violations);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BILIN_H */
