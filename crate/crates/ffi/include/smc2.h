#ifndef SMC2_H
#define SMC2_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum Smc2Status {
  SMC2_STATUS_OK = 0,
  SMC2_STATUS_NULL_POINTER = 1,
  SMC2_STATUS_INVALID_ARGUMENT = 2,
  SMC2_STATUS_DOMAIN = 3,
  SMC2_STATUS_IO = 4,
  SMC2_STATUS_RUNTIME = 5,
  SMC2_STATUS_BUFFER_TOO_SMALL = 6,
  SMC2_STATUS_PANIC = 7,
} Smc2Status;

// Observations plus the SIR settings they were simulated with.
typedef struct Smc2Dataset Smc2Dataset;

// Output of one sampler run.
typedef struct Smc2Result Smc2Result;

// Settings for [`smc2_run_sir`]; start from [`smc2_run_config_default`].
typedef struct Smc2RunConfig {
  size_t n;
  size_t k;
  size_t nx;
  size_t p;
  uint64_t seed;
  // Proposal covariance is `sigma_scale · I`.
  double sigma_scale;
  // Non-zero selects the Gaussian-conditional L-kernel, zero the forward kernel.
  int optimal_lkernel;
  // Non-zero uses the per-susceptible Reed–Frost infection probability.
  int reed_frost_standard;
} Smc2RunConfig;

// Diagnostics of one outer iteration.
typedef struct Smc2IterationInfo {
  // Iteration number, counting from 1.
  size_t k;
  double ess;
  double l;
  int resampled;
  double log_z_increment;
} Smc2IterationInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *smc2_version(void);

// Message for the last failed call on this thread (empty after a success).
// Valid until the next call into the library from the same thread.
const char *smc2_last_error_message(void);

// Simulates an SIR dataset of `t` observations at `(beta, gamma)`.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum Smc2Status smc2_dataset_simulate_sir(uint64_t seed,
                                          double beta,
                                          double gamma,
                                          uint64_t n_pop,
                                          uint64_t i0,
                                          size_t t,
                                          int reed_frost_standard,
                                          struct Smc2Dataset **out);

// Loads a `t,y` CSV (and its `.meta` sidecar, if present).
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum Smc2Status smc2_dataset_load(const char *path, struct Smc2Dataset **out);

// Writes the dataset as CSV plus sidecar.
//
// # Safety
// `dataset` must come from this library; `path` must be NUL-terminated.
enum Smc2Status smc2_dataset_save(const struct Smc2Dataset *dataset, const char *path);

// Number of observations; 0 for a null handle.
//
// # Safety
// `dataset` must be null or come from this library.
size_t smc2_dataset_len(const struct Smc2Dataset *dataset);

// Copies the observations into `out[0..capacity]`.
//
// # Safety
// `out` must point to `capacity` writable doubles.
enum Smc2Status smc2_dataset_observations(const struct Smc2Dataset *dataset,
                                          double *out,
                                          size_t capacity);

// # Safety
// `dataset` must be null or a handle not yet freed.
void smc2_dataset_free(struct Smc2Dataset *dataset);

// Desk-scale defaults: N=128, K=10, N_x=200, P=1, Σ=0.1·I, optimal L-kernel.
struct Smc2RunConfig smc2_run_config_default(void);

// Runs SMC² on an SIR dataset using `config.p` in-process workers.
//
// # Safety
// `dataset` and `config` must be valid; `out` must be writable.
enum Smc2Status smc2_run_sir(const struct Smc2Dataset *dataset,
                             const struct Smc2RunConfig *config,
                             struct Smc2Result **out);

// Runs one particle-MCMC chain of length `m` on an SIR dataset.
//
// # Safety
// `dataset` must be valid; `out` must be writable.
enum Smc2Status smc2_run_pmcmc_sir(const struct Smc2Dataset *dataset,
                                   size_t m,
                                   size_t nx,
                                   double sigma_scale,
                                   uint64_t seed,
                                   int reed_frost_standard,
                                   struct Smc2Result **out);

// Number of parameters in the estimate; 0 for a null handle.
//
// # Safety
// `result` must be null or come from this library.
size_t smc2_result_dim(const struct Smc2Result *result);

// Copies the parameter estimate (recycled for SMC², post-burn-in mean for p-MCMC).
//
// # Safety
// `out` must point to `capacity` writable doubles.
enum Smc2Status smc2_result_estimate(const struct Smc2Result *result, double *out, size_t capacity);

// Number of outer iterations recorded (0 for p-MCMC results).
//
// # Safety
// `result` must be null or come from this library.
size_t smc2_result_iterations(const struct Smc2Result *result);

// # Safety
// `result` must be valid; `out` must be writable.
enum Smc2Status smc2_result_iteration(const struct Smc2Result *result,
                                      size_t index,
                                      struct Smc2IterationInfo *out);

// Sampler wall clock in seconds; NaN for a null handle.
//
// # Safety
// `result` must be null or come from this library.
double smc2_result_seconds(const struct Smc2Result *result);

// Chain acceptance rate for p-MCMC results, NaN otherwise.
//
// # Safety
// `result` must be null or come from this library.
double smc2_result_acceptance_rate(const struct Smc2Result *result);

// # Safety
// `result` must be null or a handle not yet freed.
void smc2_result_free(struct Smc2Result *result);

// Expands duplication counts into ancestor indices using the distributed
// redistribution on `p` in-process workers. `out` receives `n` indices.
//
// # Safety
// `ncopies` must point to `n` readable values and `out` to `n` writable ones.
enum Smc2Status smc2_redistribute_indices(const size_t *ncopies, size_t n, size_t p, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SMC2_H */
