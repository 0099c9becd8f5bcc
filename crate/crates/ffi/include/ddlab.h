#ifndef DDLAB_H
#define DDLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DdlabStatus {
  DDLAB_STATUS_OK = 0,
  DDLAB_STATUS_NULL_POINTER = 1,
  DDLAB_STATUS_INVALID_ARGUMENT = 2,
  DDLAB_STATUS_NUMERICAL = 3,
  DDLAB_STATUS_IO = 4,
  DDLAB_STATUS_PANIC = 5,
} DdlabStatus;

typedef enum DdlabAlgorithmKind {
  DDLAB_ALGORITHM_KIND_GD = 0,
  DDLAB_ALGORITHM_KIND_DD = 1,
} DdlabAlgorithmKind;

typedef enum DdlabStopMode {
  DDLAB_STOP_MODE_ABSOLUTE = 0,
  DDLAB_STOP_MODE_LOG = 1,
} DdlabStopMode;

typedef struct DdlabModel DdlabModel;

typedef struct DdlabSpec DdlabSpec;

typedef struct DdlabTrajectory DdlabTrajectory;

/**
 * Step sizes. For GD only `eta1` (weights) and `gamma1` (head) are read.
 */
typedef struct DdlabAlgorithm {
  enum DdlabAlgorithmKind kind;
  double eta0;
  double eta1;
  double gamma0;
  double gamma1;
} DdlabAlgorithm;

typedef struct DdlabStepRecord {
  size_t t;
  double train_error;
  double test_error;
} DdlabStepRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call on the same thread.
 */
const char *ddlab_last_error(void);

/**
 * # Safety
 * `kind` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DdlabStatus ddlab_model_new(const char *kind, size_t width, struct DdlabModel **out);

/**
 * # Safety
 * `model` must come from [`ddlab_model_new`] and not be used afterwards.
 */
void ddlab_model_free(struct DdlabModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t ddlab_model_width(const struct DdlabModel *model);

/**
 * # Safety
 * `model` must be a live handle.
 */
size_t ddlab_model_head_width(const struct DdlabModel *model);

/**
 * Loss `Ψ(h, y, a)` and its gradient in `h`. `grad_h` may be null.
 *
 * # Safety
 * `h` holds `h_len` values, `a` holds `a_len` values, `grad_h` (if not
 * null) has room for `h_len` values.
 */
enum DdlabStatus ddlab_model_eval(const struct DdlabModel *model,
                                  const double *h,
                                  size_t h_len,
                                  double y,
                                  const double *a,
                                  size_t a_len,
                                  double *psi,
                                  double *grad_h);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum DdlabStatus ddlab_spec_signalless(size_t d, struct DdlabSpec **out);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum DdlabStatus ddlab_spec_xor(size_t d, double lambda, struct DdlabSpec **out);

/**
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DdlabStatus ddlab_spec_from_toml(const char *text, struct DdlabSpec **out);

/**
 * # Safety
 * `spec` must be a live handle.
 */
size_t ddlab_spec_num_modes(const struct DdlabSpec *spec);

/**
 * Copy `χ` row-major into `out`, which must hold `J*J` values.
 *
 * # Safety
 * `spec` must be a live handle and `out` must hold `len` values.
 */
enum DdlabStatus ddlab_spec_chi(const struct DdlabSpec *spec, double *out, size_t len);

/**
 * # Safety
 * `spec` must come from a `ddlab_spec_*` constructor and not be used
 * afterwards.
 */
void ddlab_spec_free(struct DdlabSpec *spec);

/**
 * Sample `n` points from `spec` and train for `steps` steps. If the run
 * diverges the status is `Numerical` and `out` still receives the records
 * produced before the failure.
 *
 * # Safety
 * `spec` and `model` must be live handles and `out` a valid pointer.
 */
enum DdlabStatus ddlab_trajectory_run(const struct DdlabSpec *spec,
                                      const struct DdlabModel *model,
                                      struct DdlabAlgorithm algorithm,
                                      size_t n,
                                      size_t steps,
                                      uint64_t seed,
                                      struct DdlabTrajectory **out);

/**
 * # Safety
 * `traj` must be a live handle.
 */
size_t ddlab_trajectory_len(const struct DdlabTrajectory *traj);

/**
 * Record `index` (0-based).
 *
 * # Safety
 * `traj` must be a live handle and `out` a valid pointer.
 */
enum DdlabStatus ddlab_trajectory_record(const struct DdlabTrajectory *traj,
                                         size_t index,
                                         struct DdlabStepRecord *out);

/**
 * # Safety
 * `traj` must come from [`ddlab_trajectory_run`] and not be used afterwards.
 */
void ddlab_trajectory_free(struct DdlabTrajectory *traj);

/**
 * Signal-less SE diagonal `Ω_t[t,t]` and test error for `t = 1..=len`.
 *
 * # Safety
 * `omega` and `test` must each hold `len` values.
 */
enum DdlabStatus ddlab_signalless_closed_form(double eta0,
                                              double eta1,
                                              double alpha,
                                              double theta_sq,
                                              double *omega,
                                              double *test,
                                              size_t len);

/**
 * Online early stopping. `out` receives the 1-based stop time, or 0 when
 * the rule never fires.
 *
 * # Safety
 * `errors` must hold `len` values and `out` must be valid.
 */
enum DdlabStatus ddlab_early_stop_online(const double *errors,
                                         size_t len,
                                         double eps,
                                         enum DdlabStopMode mode,
                                         size_t *out);

/**
 * 1-based index of the smallest candidate error, ties toward the smaller
 * index.
 *
 * # Safety
 * `errors` must hold `len` values and `out` must be valid.
 */
enum DdlabStatus ddlab_select_candidate(const double *errors, size_t len, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DDLAB_H */
