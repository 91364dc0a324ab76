#ifndef RUNGS_H
#define RUNGS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum RungsStatus {
  RUNGS_STATUS_OK = 0,
  RUNGS_STATUS_NULL_ARGUMENT = 1,
  RUNGS_STATUS_INVALID_UTF8 = 2,
  /**
   * The spec did not parse or failed validation.
   */
  RUNGS_STATUS_INVALID_SPEC = 3,
  RUNGS_STATUS_INVALID_ARGUMENT = 4,
  /**
   * The token is not an outstanding job.
   */
  RUNGS_STATUS_UNKNOWN_TOKEN = 5,
  /**
   * Reading or writing the journal failed.
   */
  RUNGS_STATUS_JOURNAL = 6,
  /**
   * The engine refused the request, for instance extending a synchronous experiment.
   */
  RUNGS_STATUS_REJECTED = 7,
  /**
   * The output buffer is too small; the required length was written back.
   */
  RUNGS_STATUS_BUFFER_TOO_SMALL = 8,
  RUNGS_STATUS_PANIC = 9,
} RungsStatus;

typedef enum RungsJobKind {
  RUNGS_JOB_KIND_JOB = 0,
  /**
   * Nothing to hand out until a result arrives.
   */
  RUNGS_JOB_KIND_BLOCKED = 1,
  RUNGS_JOB_KIND_FINISHED = 2,
} RungsJobKind;

/**
 * Opaque tuner handle.
 */
typedef struct RungsTuner RungsTuner;

/**
 * A job to run, valid when `kind` is `RUNGS_JOB_KIND_JOB`.
 */
typedef struct RungsJob {
  enum RungsJobKind kind;
  uint64_t token;
  uint32_t bracket;
  uint32_t early_stopping_rate;
  uint64_t config_id;
  uint32_t rung;
  /**
   * Resource to train to.
   */
  uint64_t resource;
  /**
   * Resource reached by the previous rung, 0 for rung 0.
   */
  uint64_t prior_resource;
} RungsJob;

typedef struct RungsRung {
  uint64_t configs;
  uint64_t resource;
} RungsRung;

typedef struct RungsDemand {
  /**
   * GPUs per task.
   */
  uint32_t kappa;
  /**
   * Runnable tasks.
   */
  uint64_t stack_size;
  double weight;
} RungsDemand;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread; do not free it.
 */
const char *rungs_last_error(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void rungs_string_free(char *s);

/**
 * Creates a tuner from a JSON experiment spec. With a non-null
 * `journal_path` the journal is written to that file (which must not exist),
 * otherwise it is kept in memory.
 *
 * # Safety
 * `spec_json` and `journal_path` must be null or NUL-terminated; `out` must be writable.
 */
enum RungsStatus rungs_tuner_new(const char *spec_json,
                                 const char *journal_path,
                                 bool fsync,
                                 uint64_t now,
                                 struct RungsTuner **out);

/**
 * Replays the journal at `journal_path` and continues it, widening the
 * experiment by `additional_n` configurations.
 *
 * # Safety
 * `journal_path` must be NUL-terminated; `out` must be writable.
 */
enum RungsStatus rungs_tuner_resume(const char *journal_path,
                                    uint64_t additional_n,
                                    bool fsync,
                                    uint64_t now,
                                    struct RungsTuner **out);

/**
 * # Safety
 * `tuner` must be null or a handle from this library not yet freed.
 */
void rungs_tuner_free(struct RungsTuner *tuner);

/**
 * # Safety
 * `tuner` must be a live handle and `out` writable.
 */
enum RungsStatus rungs_tuner_next_job(struct RungsTuner *tuner, uint64_t now, struct RungsJob *out);

/**
 * Hyperparameter values of a configuration as a JSON object.
 *
 * # Safety
 * `tuner` must be a live handle and `out` writable.
 */
enum RungsStatus rungs_tuner_config_json(const struct RungsTuner *tuner,
                                         uint64_t config_id,
                                         char **out);

/**
 * Records the loss of an outstanding job. NaN counts as the worst loss.
 * Re-sending an identical result is accepted and sets `*duplicate`.
 *
 * # Safety
 * `tuner` must be a live handle; `duplicate` may be null.
 */
enum RungsStatus rungs_tuner_record_result(struct RungsTuner *tuner,
                                           uint64_t token,
                                           double loss,
                                           uint64_t now,
                                           bool *duplicate);

/**
 * Gives up on an outstanding job; its configuration is handed out again.
 *
 * # Safety
 * `tuner` must be a live handle.
 */
enum RungsStatus rungs_tuner_drop_job(struct RungsTuner *tuner, uint64_t token, uint64_t now);

/**
 * # Safety
 * `tuner` must be a live handle.
 */
enum RungsStatus rungs_tuner_extend(struct RungsTuner *tuner, uint64_t additional_n, uint64_t now);

/**
 * Experiment snapshot (rungs, incumbent, progress) as JSON.
 *
 * # Safety
 * `tuner` must be a live handle and `out` writable.
 */
enum RungsStatus rungs_tuner_status_json(const struct RungsTuner *tuner, char **out);

/**
 * Writes the synchronous rung sizes of a bracket started with `n`
 * configurations into `out` (room for `capacity` rows) and the row count to
 * `*len`. When `capacity` is too small only `*len` is written.
 *
 * # Safety
 * `out` must have room for `capacity` rows (may be null when 0); `len` must be writable.
 */
enum RungsStatus rungs_rung_schedule(uint64_t n,
                                     uint64_t min_resource,
                                     uint64_t max_resource,
                                     uint64_t eta,
                                     uint32_t early_stopping_rate,
                                     struct RungsRung *out,
                                     size_t capacity,
                                     size_t *len);

/**
 * Time to the first fully trained configuration, in units of `time(R)`,
 * as the fraction `*numer / *denom`.
 *
 * # Safety
 * `numer` and `denom` must be writable.
 */
enum RungsStatus rungs_completion_time_ratio(uint64_t min_resource,
                                             uint64_t max_resource,
                                             uint64_t eta,
                                             uint32_t early_stopping_rate,
                                             uint64_t *numer,
                                             uint64_t *denom);

/**
 * Weighted max-min fair split of `capacity` GPUs; `out[i]` receives the
 * allocation of `demands[i]`.
 *
 * # Safety
 * `demands` and `out` must each point to `len` elements (may be null when `len` is 0).
 */
enum RungsStatus rungs_water_fill(const struct RungsDemand *demands,
                                  size_t len,
                                  uint64_t capacity,
                                  uint64_t *out);

/**
 * Largest GPU count whose parallel efficiency under the default scaling
 * model with `overhead` stays at or above `tau`, clamped to `cluster_size`.
 *
 * # Safety
 * `out` must be writable.
 */
enum RungsStatus rungs_max_gpus_for_efficiency(double overhead,
                                               double tau,
                                               uint32_t cluster_size,
                                               uint32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RUNGS_H */
