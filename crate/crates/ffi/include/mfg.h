#ifndef MFG_H
#define MFG_H

#include <stddef.h>
#include <stdint.h>

// Status codes returned by every fallible entry point.
typedef enum MfgStatus {
  MFG_STATUS_OK = 0,
  MFG_STATUS_NULL_POINTER = 1,
  MFG_STATUS_INVALID_INPUT = 2,
  MFG_STATUS_NON_CONTRACTION = 3,
  MFG_STATUS_NUMERICAL = 4,
  MFG_STATUS_IO = 5,
  MFG_STATUS_PANIC = 6,
} MfgStatus;

typedef struct MfgMeasure MfgMeasure;

typedef struct MfgModel MfgModel;

typedef struct MfgSolution MfgSolution;

// Solver parameters; start from [`mfg_solve_params_default`].
typedef struct MfgSolveParams {
  double dt;
  uintptr_t particles;
  uintptr_t scenarios;
  uintptr_t grid_points;
  double half_width;
  double interval_len;
  double min_interval_len;
  double picard_tol;
  uintptr_t picard_max_iter;
  uint64_t seed;
} MfgSolveParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message (NUL-terminated, truncated to `cap`) into
// `buf` and returns its full length in bytes without the terminator.
uintptr_t mfg_last_error(char *buf, uintptr_t cap);

// Builds a registered model (`free_flow`, `lq`, `lse`, `anti_monotone`,
// `flipped_lq`, `second_order_gap`).
enum MfgStatus mfg_model_new(const char *name,
                             uintptr_t dim,
                             double horizon,
                             double beta,
                             double a,
                             double b,
                             double q,
                             struct MfgModel **out);

void mfg_model_free(struct MfgModel *model);

uintptr_t mfg_model_dim(const struct MfgModel *model);

// `n` atoms of dimension `dim` (`points` is `n × dim`, row-major); `weights`
// may be null for equal weights.
enum MfgStatus mfg_measure_new(uintptr_t dim,
                               uintptr_t n,
                               const double *points,
                               const double *weights,
                               struct MfgMeasure **out);

enum MfgStatus mfg_measure_gaussian(uintptr_t dim,
                                    uintptr_t n,
                                    double mean,
                                    double std,
                                    uint64_t seed,
                                    struct MfgMeasure **out);

void mfg_measure_free(struct MfgMeasure *mu);

uintptr_t mfg_measure_len(const struct MfgMeasure *mu);

struct MfgSolveParams mfg_solve_params_default(void);

// Solves on `[0, T]` from `mu0`; `params` may be null for the defaults.
enum MfgStatus mfg_solve(const struct MfgModel *model,
                         const struct MfgMeasure *mu0,
                         const struct MfgSolveParams *params,
                         struct MfgSolution **out);

void mfg_solution_free(struct MfgSolution *sol);

uintptr_t mfg_solution_intervals(const struct MfgSolution *sol);

// Bounds, Picard iterations and largest contraction ratio after the second
// iteration (negative when there is none) of interval `j`.
enum MfgStatus mfg_solution_interval(const struct MfgSolution *sol,
                                     uintptr_t j,
                                     double *t0,
                                     double *t1,
                                     uintptr_t *iterations,
                                     double *max_ratio);

// `∂ₓV(t, x, μ)` into `out[0..dim]`.
enum MfgStatus mfg_eval_dxv(const struct MfgSolution *sol,
                            double t,
                            const double *x,
                            const struct MfgMeasure *mu,
                            double *out);

// `V(t, x, μ)` and its Monte Carlo standard error.
enum MfgStatus mfg_eval_v(const struct MfgSolution *sol,
                          double t,
                          const double *x,
                          const struct MfgMeasure *mu,
                          double *value,
                          double *stderr);

// Column `axis` of `∂_μ∂ₓV(t, x, μ, x̃)` into `out[0..dim]`.
enum MfgStatus mfg_eval_dxmuv(const struct MfgSolution *sol,
                              double t,
                              const double *x,
                              const struct MfgMeasure *mu,
                              const double *x_tilde,
                              uintptr_t axis,
                              double *out);

// Riccati coefficients `P(t), Q(t)` of the linear-quadratic family, for
// which `∂ₓV(t, x, μ) = P(t) x + Q(t) mean(μ)`.
enum MfgStatus mfg_lq_riccati(double a,
                              double b,
                              double q,
                              double horizon,
                              double t,
                              double *p_out,
                              double *q_out);

// NUL-terminated crate version.
const char *mfg_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MFG_H */
