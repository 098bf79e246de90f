#ifndef FAIRFED_H
#define FAIRFED_H

/* Generated by cbindgen from fairfed-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a C API call. Zero is success; everything else is an error whose
 * message is readable via `fairfed_last_error_message`.
 */
typedef enum FairfedStatus {
  FAIRFED_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  FAIRFED_STATUS_NULL_ARGUMENT = 1,
  /**
   * An input string was not valid UTF-8.
   */
  FAIRFED_STATUS_INVALID_UTF8 = 2,
  /**
   * The configuration JSON failed to parse or validate.
   */
  FAIRFED_STATUS_INVALID_CONFIG = 3,
  /**
   * The experiment itself failed (degenerate data, infeasible split, ...).
   */
  FAIRFED_STATUS_RUN_FAILED = 4,
  /**
   * A panic was caught at the ABI boundary; state may be inconsistent.
   */
  FAIRFED_STATUS_PANICKED = 5,
} FairfedStatus;

/**
 * A finished experiment: headline record, per-round reports, final model.
 */
typedef struct FairfedRun FairfedRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string; do not free.
 */
const char *fairfed_version(void);

/**
 * Returns the calling thread's most recent error message, or null if the
 * last call succeeded. The caller owns the string: release it with
 * `fairfed_string_free`.
 */
char *fairfed_last_error_message(void);

/**
 * Releases a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must be a pointer previously returned by this library and not yet
 * freed.
 */
void fairfed_string_free(char *s);

/**
 * Parses `config_json` (one experiment configuration), executes the full
 * federated run, and writes an owned handle to `out_run`.
 *
 * # Safety
 * `config_json` must be null or nul-terminated; `out_run` must point to
 * writable memory for one pointer.
 */
enum FairfedStatus fairfed_run_new(const char *config_json, struct FairfedRun **out_run);

/**
 * Writes the run's headline record (accuracy, fairness metrics, fallback
 * counts) to `out_json` as an owned JSON string.
 *
 * # Safety
 * `run` must be a live handle from `fairfed_run_new`; `out_json` must point
 * to writable memory for one pointer.
 */
enum FairfedStatus fairfed_run_record_json(const struct FairfedRun *run, char **out_json);

/**
 * Writes the full per-round report (metrics, per-client rows, exchanged
 * sums, model) to `out_json` as an owned JSON array string.
 *
 * # Safety
 * Same contract as `fairfed_run_record_json`.
 */
enum FairfedStatus fairfed_run_report_json(const struct FairfedRun *run, char **out_json);

/**
 * Exposes the final model as a borrowed view: feature weights followed by
 * the bias. The pointer stays valid until `fairfed_run_free`.
 *
 * # Safety
 * `run` must be a live handle; `out_ptr` and `out_len` must point to
 * writable memory.
 */
enum FairfedStatus fairfed_run_theta(const struct FairfedRun *run,
                                     const double **out_ptr,
                                     size_t *out_len);

/**
 * Releases a run handle. Null is a no-op.
 *
 * # Safety
 * `run` must be a handle from `fairfed_run_new`, not yet freed.
 */
void fairfed_run_free(struct FairfedRun *run);

/**
 * Parses `spec_json` (a sweep specification: base config plus method, alpha,
 * beta, eta, learning-rate, and seed axes), runs the whole grid, and writes
 * the per-cell summaries to `out_json` as an owned JSON array. Fails with
 * `RunFailed` if any grid cell fails.
 *
 * # Safety
 * `spec_json` must be null or nul-terminated; `out_json` must point to
 * writable memory for one pointer.
 */
enum FairfedStatus fairfed_sweep_json(const char *spec_json, char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAIRFED_H */
