#ifndef HETFED_H
#define HETFED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Block kinds accepted by [`hetfed_parameter_count`].
 */
typedef enum HetfedBlockKind {
  HETFED_BLOCK_KIND_PLAIN = 0,
  HETFED_BLOCK_KIND_SKIP = 1,
  HETFED_BLOCK_KIND_BOTTLENECK = 2,
} HetfedBlockKind;

/**
 * Result codes. Values 2-4 match the CLI exit codes.
 */
typedef enum HetfedStatus {
  HETFED_STATUS_OK = 0,
  HETFED_STATUS_ERROR = 1,
  HETFED_STATUS_CONFIG_ERROR = 2,
  HETFED_STATUS_INFEASIBLE = 3,
  HETFED_STATUS_IO_ERROR = 4,
  HETFED_STATUS_NULL_POINTER = 5,
  HETFED_STATUS_PANIC = 6,
} HetfedStatus;

/**
 * Parsed, validated experiment configuration.
 */
typedef struct HetfedExperiment HetfedExperiment;

/**
 * Per-arm mean metrics of a finished run.
 */
typedef struct HetfedReport HetfedReport;

typedef struct HetfedMetrics {
  double final_global_accuracy;
  /**
   * 1 when `time_to_accuracy_s` is meaningful, 0 when the target was not
   * reached.
   */
  int32_t time_reached;
  double time_to_accuracy_s;
  double stability_variance;
  double effectiveness_delta;
} HetfedMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread. The pointer stays valid until
 * the next failing call on the same thread. Never null.
 */
const char *hetfed_last_error_message(void);

/**
 * Static, NUL-terminated version string.
 */
const char *hetfed_version(void);

/**
 * Parses a TOML configuration. Environment overrides are not applied.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must be writable.
 */
enum HetfedStatus hetfed_experiment_from_toml(const char *toml, struct HetfedExperiment **out);

/**
 * Loads a TOML configuration file, applying `HETFED_SEED` / `HETFED_OUT`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum HetfedStatus hetfed_experiment_from_file(const char *path, struct HetfedExperiment **out);

/**
 * # Safety
 * `exp` must come from a constructor above or be null.
 */
enum HetfedStatus hetfed_experiment_set_seed(struct HetfedExperiment *exp, uint64_t seed);

/**
 * # Safety
 * `exp` must come from a constructor above; `dir` must be NUL-terminated.
 */
enum HetfedStatus hetfed_experiment_set_output_dir(struct HetfedExperiment *exp, const char *dir);

/**
 * # Safety
 * `exp` must come from a constructor above (or be null) and not be used
 * afterwards.
 */
void hetfed_experiment_free(struct HetfedExperiment *exp);

/**
 * Runs the experiment. When `write_outputs` is non-zero the CSV/JSON
 * outputs are written to the configured output directory.
 *
 * # Safety
 * `exp` must be a live handle; `out` must be writable.
 */
enum HetfedStatus hetfed_run(const struct HetfedExperiment *exp,
                             int32_t write,
                             struct HetfedReport **out);

/**
 * Number of arms in the report; 0 for null.
 *
 * # Safety
 * `report` must be a live handle or null.
 */
size_t hetfed_report_len(const struct HetfedReport *report);

/**
 * Copies the arm label into `buf` (NUL-terminated, truncated to fit) and
 * stores the untruncated length without NUL in `needed` when non-null.
 *
 * # Safety
 * `report` must be a live handle; `buf` must hold `buf_len` bytes or be
 * null with `buf_len == 0`.
 */
enum HetfedStatus hetfed_report_arm_name(const struct HetfedReport *report,
                                         size_t index,
                                         char *buf,
                                         size_t buf_len,
                                         size_t *needed);

/**
 * # Safety
 * `report` must be a live handle; `out` must be writable.
 */
enum HetfedStatus hetfed_report_metrics(const struct HetfedReport *report,
                                        size_t index,
                                        struct HetfedMetrics *out);

/**
 * # Safety
 * `report` must be a live handle (or null) and not be used afterwards.
 */
void hetfed_report_free(struct HetfedReport *report);

/**
 * Population variance of the accuracies `correct[i] / total[i]`, computed
 * exactly and rounded once.
 *
 * # Safety
 * `correct` and `total` must each hold `n` values; `out` must be writable.
 */
enum HetfedStatus hetfed_stability(const uint64_t *correct,
                                   const uint64_t *total,
                                   size_t n,
                                   double *out);

/**
 * Closed-form parameter count of a single-exit model.
 *
 * # Safety
 * `out` must be writable.
 */
enum HetfedStatus hetfed_parameter_count(size_t input_dim,
                                         size_t hidden_dim,
                                         size_t num_blocks,
                                         enum HetfedBlockKind kind,
                                         size_t num_classes,
                                         size_t proto_dim,
                                         uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HETFED_H */
