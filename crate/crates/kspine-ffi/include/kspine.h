#ifndef KSPINE_H
#define KSPINE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KsStatus {
  KS_STATUS_OK = 0,
  KS_STATUS_NULL_POINTER = 1,
  KS_STATUS_INVALID_UTF8 = 2,
  KS_STATUS_INVALID_MODEL = 3,
  KS_STATUS_INVALID_ARGUMENT = 4,
  KS_STATUS_NOT_CRITICAL = 5,
  KS_STATUS_NUMERICAL = 6,
  KS_STATUS_BUFFER_TOO_SMALL = 7,
  KS_STATUS_SIMULATION_FAILED = 8,
  KS_STATUS_PANIC = 9,
} KsStatus;

/**
 * Offspring model with its spectral data.
 */
typedef struct KsModel KsModel;

/**
 * Precomputed rates for simulating trees with k spines.
 */
typedef struct KsSpineCache KsSpineCache;

/**
 * Summary of one tree with k spines.
 */
typedef struct KsSpineSample {
  /**
   * Number of spine splitting events.
   */
  uint32_t splits;
  /**
   * Population size at the horizon.
   */
  uint64_t population;
  /**
   * Importance weight back to the uniform sample law; NaN when undefined.
   */
  double weight;
  /**
   * Time of the first splitting divided by the horizon; NaN when k < 2.
   */
  double first_split;
} KsSpineSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` as a
 * NUL-terminated string, truncating to `len` bytes. Returns the full
 * message length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
uintptr_t ks_last_error_message(char *buf, uintptr_t len);

/**
 * Parses a model from its JSON description and computes its spectral data.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KsStatus ks_model_from_json(const char *json, struct KsModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`ks_model_from_json`] and not be used afterwards.
 */
void ks_model_free(struct KsModel *model);

/**
 * Number of types d.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum KsStatus ks_model_num_types(const struct KsModel *model, uintptr_t *out);

/**
 * Spectral data: Perron root ρ, right eigenvector ξ, left eigenvector η
 * (normalized so that ξ·1 = η·ξ = 1) and the variance constant ζ. The
 * vectors need room for d values each; any output pointer may be null.
 *
 * # Safety
 * Non-null pointers must be valid; `xi` and `eta` must hold `len` values.
 */
enum KsStatus ks_model_spectral(const struct KsModel *model,
                                double *rho,
                                double *xi,
                                double *eta,
                                uintptr_t len,
                                double *zeta,
                                bool *critical);

/**
 * Generating function F_t(s) of the population at time t, one value per
 * root type. `s` and `out` hold d values.
 *
 * # Safety
 * `model` must be a live handle; `s` and `out` must hold `len` values.
 */
enum KsStatus ks_generating_function(const struct KsModel *model,
                                     double t,
                                     const double *s,
                                     double *out,
                                     uintptr_t len);

/**
 * Builds the rate tables for trees with `k` spines up to `horizon` under
 * discount `theta` (d values). The model must be critical.
 *
 * # Safety
 * `model` must be a live handle, `theta` must hold `len` values and `out`
 * must be a valid pointer.
 */
enum KsStatus ks_spine_cache_new(const struct KsModel *model,
                                 uintptr_t k,
                                 const double *theta,
                                 uintptr_t len,
                                 double horizon,
                                 struct KsSpineCache **out);

/**
 * Releases a spine cache. Null is ignored.
 *
 * # Safety
 * `cache` must come from [`ks_spine_cache_new`] and not be used afterwards.
 */
void ks_spine_cache_free(struct KsSpineCache *cache);

/**
 * Simulates replicate `replicate` of the random stream `seed` from a root
 * of 0-based type `root`. Equal arguments give equal results.
 *
 * # Safety
 * `cache` must be a live handle used by one thread at a time; `out` must be
 * a valid pointer.
 */
enum KsStatus ks_spine_simulate(struct KsSpineCache *cache,
                                uintptr_t root,
                                uint64_t seed,
                                uint64_t replicate,
                                struct KsSpineSample *out);

/**
 * Draws `target` uniform k-samples from trees started by one individual
 * of type `root` and conditioned on N_T ≥ k, by rejection. Writes the
 * rescaled first split times to `out` and the number of simulated trees to
 * `attempts`.
 *
 * # Safety
 * `model` must be a live handle, `out` must hold `target` values and
 * `attempts` must be null or valid.
 */
enum KsStatus ks_sample_first_splits(const struct KsModel *model,
                                     uintptr_t k,
                                     double horizon,
                                     uintptr_t root,
                                     uintptr_t target,
                                     uint64_t seed,
                                     double *out,
                                     uint64_t *attempts);

/**
 * Limit density of the first split time of a uniform k-sample, rescaled
 * by the horizon, at t in [0, 1].
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum KsStatus ks_limit_first_split_density(uintptr_t k, double t, double *out);

/**
 * Limit distribution function of the rescaled first split time at x.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum KsStatus ks_limit_first_split_cdf(uintptr_t k, double x, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KSPINE_H */
