/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef SITL_H
#define SITL_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes. The positive codes match the command-line exit codes.
 */
typedef enum {
  SITL_STATUS_OK = 0,
  /**
   * Unreadable or malformed input file or estimator document.
   */
  SITL_STATUS_INPUT = 2,
  /**
   * Invalid configuration, argument or domain.
   */
  SITL_STATUS_CONFIG = 3,
  /**
   * Not enough data, degenerate data or solver failure.
   */
  SITL_STATUS_FIT = 4,
  /**
   * A required pointer argument was null.
   */
  SITL_STATUS_NULL_ARGUMENT = 10,
  /**
   * A string argument was not valid UTF-8.
   */
  SITL_STATUS_INVALID_UTF8 = 11,
  /**
   * Internal error; the library caught a panic.
   */
  SITL_STATUS_INTERNAL = 12,
} SitlStatus;

/**
 * Similarity kernel selector for [`sitl_transfer`].
 */
typedef enum {
  SITL_KERNEL_GAUSSIAN = 0,
  SITL_KERNEL_UNIFORM = 1,
} SitlKernel;

/**
 * A censored cohort loaded from the two CSV tables.
 */
typedef struct SitlCohort SitlCohort;

/**
 * A baseline coefficient surface (the shareable estimator).
 */
typedef struct SitlEstimator SitlEstimator;

/**
 * A fitted transfer estimate.
 */
typedef struct SitlTransfer SitlTransfer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *sitl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sitl_version(void);

/**
 * Loads a cohort from its observation and functional CSV files.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
SitlStatus sitl_cohort_load(const char *observations,
                            const char *functional,
                            const char *label,
                            SitlCohort **out);

/**
 * Number of subjects and functional predictors.
 *
 * # Safety
 * `cohort` must come from [`sitl_cohort_load`]; outputs must be writable.
 */
SitlStatus sitl_cohort_shape(const SitlCohort *cohort, uintptr_t *subjects, uintptr_t *predictors);

/**
 * # Safety
 * `cohort` must be null or come from [`sitl_cohort_load`], freed once.
 */
void sitl_cohort_free(SitlCohort *cohort);

/**
 * Fits the baseline estimator on the grid `tau_step, 2 tau_step, ..., tau_max`
 * with cubic splines. `knots == 0` picks the size-based default.
 *
 * # Safety
 * `cohort` must be a live handle; `out` must be writable.
 */
SitlStatus sitl_fit_baseline(const SitlCohort *cohort,
                             double tau_max,
                             double tau_step,
                             uintptr_t knots,
                             SitlEstimator **out);

/**
 * Parses an estimator exchange document (`len` bytes, no NUL needed).
 *
 * # Safety
 * `bytes` must point to `len` readable bytes; `out` must be writable.
 */
SitlStatus sitl_estimator_import(const uint8_t *bytes, uintptr_t len, SitlEstimator **out);

/**
 * Serializes an estimator to its exchange document. The returned buffer is
 * NUL-terminated, `len` excludes the NUL, and it must be released with
 * [`sitl_string_free`].
 *
 * # Safety
 * `estimator` must be a live handle; outputs must be writable.
 */
SitlStatus sitl_estimator_export(const SitlEstimator *estimator, char **out, uintptr_t *len);

/**
 * Coefficient `alpha_d(s, tau)` of an estimator; `predictor` is 0-based and
 * `tau` must be a grid level.
 *
 * # Safety
 * `estimator` must be a live handle; `value` must be writable.
 */
SitlStatus sitl_estimator_alpha(const SitlEstimator *estimator,
                                uintptr_t predictor,
                                double tau,
                                double s,
                                double *value);

/**
 * # Safety
 * `estimator` must be null or a handle from this library, freed once.
 */
void sitl_estimator_free(SitlEstimator *estimator);

/**
 * # Safety
 * `s` must be null or come from [`sitl_estimator_export`], freed once.
 */
void sitl_string_free(char *s);

/**
 * Runs the transfer estimate of `target` from `count` source estimators.
 * `bandwidth <= 0` picks the default; `seed` drives the half split.
 *
 * # Safety
 * `sources` must point to `count` live estimator handles; `out` must be
 * writable.
 */
SitlStatus sitl_transfer(const SitlCohort *target,
                         const SitlEstimator *const *sources,
                         uintptr_t count,
                         SitlKernel kernel,
                         double bandwidth,
                         uint64_t seed,
                         SitlTransfer **out);

/**
 * Writes the normalized source weights into `weights[0..capacity]`, and
 * the actual count into `count`. Fails with `Config` if `capacity` is too
 * small (after still setting `count`).
 *
 * # Safety
 * `fit` must be a live handle; `weights` must hold `capacity` doubles.
 */
SitlStatus sitl_transfer_weights(const SitlTransfer *fit,
                                 double *weights,
                                 uintptr_t capacity,
                                 uintptr_t *count);

/**
 * Whether every source was uninformative and the fit fell back to the
 * target alone.
 *
 * # Safety
 * `fit` must be a live handle; `fallback` must be writable.
 */
SitlStatus sitl_transfer_fallback(const SitlTransfer *fit, bool *fallback);

/**
 * Final coefficient `alpha_d(s, tau)` (transfer plus debias).
 *
 * # Safety
 * `fit` must be a live handle; `value` must be writable.
 */
SitlStatus sitl_transfer_alpha(const SitlTransfer *fit,
                               uintptr_t predictor,
                               double tau,
                               double s,
                               double *value);

/**
 * # Safety
 * `fit` must be null or a handle from [`sitl_transfer`], freed once.
 */
void sitl_transfer_free(SitlTransfer *fit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SITL_H */
