#ifndef PREVMATCH_H
#define PREVMATCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PvmStatus {
  PVM_STATUS_OK = 0,
  PVM_STATUS_NULL_POINTER = 1,
  PVM_STATUS_INVALID_UTF8 = 2,
  PVM_STATUS_CONFIG = 3,
  PVM_STATUS_INVALID_ARGUMENT = 4,
  PVM_STATUS_IO = 5,
  PVM_STATUS_FORMAT = 6,
  PVM_STATUS_ABORTED = 7,
  PVM_STATUS_PANIC = 8,
} PvmStatus;

/**
 * Training configuration.
 */
typedef struct PvmConfig PvmConfig;

/**
 * A finished training run: final model, history and summary.
 */
typedef struct PvmRun PvmRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *pvm_last_error_message(void);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a pointer returned by this library, freed once.
 */
void pvm_string_free(char *s);

/**
 * A config holding every default.
 */
struct PvmConfig *pvm_config_default(void);

/**
 * Parses `key = value` text over the defaults.
 *
 * # Safety
 * `text` must be a nul-terminated string; `out` must be writable.
 */
enum PvmStatus pvm_config_parse(const char *text, struct PvmConfig **out);

/**
 * Sets one key; the config is left unchanged if the result is invalid.
 *
 * # Safety
 * `cfg` must come from this library; `key` and `value` nul-terminated.
 */
enum PvmStatus pvm_config_set(struct PvmConfig *cfg, const char *key, const char *value);

/**
 * The full effective config as text; free with [`pvm_string_free`].
 *
 * # Safety
 * `cfg` must come from this library.
 */
char *pvm_config_echo(const struct PvmConfig *cfg);

/**
 * # Safety
 * `cfg` must be null or come from this library, freed once.
 */
void pvm_config_free(struct PvmConfig *cfg);

/**
 * Generates the data and trains every configured epoch.
 *
 * # Safety
 * `cfg` must come from this library; `out` must be writable.
 */
enum PvmStatus pvm_train(const struct PvmConfig *cfg, struct PvmRun **out);

/**
 * # Safety
 * `run` must be null or come from this library, freed once.
 */
void pvm_run_free(struct PvmRun *run);

/**
 * Test mIoU, shifted-test mIoU and their difference.
 *
 * # Safety
 * `run` must come from this library; outputs may be null to skip them.
 */
enum PvmStatus pvm_run_scores(const struct PvmRun *run,
                              double *test_miou,
                              double *shifted_miou,
                              double *gap);

/**
 * Number of epochs the run trained.
 *
 * # Safety
 * `run` must be null or come from this library.
 */
uint32_t pvm_run_epochs(const struct PvmRun *run);

/**
 * The metrics history as CSV text; free with [`pvm_string_free`].
 *
 * # Safety
 * `run` must be null or come from this library.
 */
char *pvm_run_history_csv(const struct PvmRun *run);

/**
 * Per-pixel class labels for a `[batch, channels, height, width]` input in
 * row-major order. `labels` must hold `batch * height * width` entries.
 *
 * # Safety
 * `input` must point to `batch * channels * height * width` doubles and
 * `labels` to `labels_len` writable entries.
 */
enum PvmStatus pvm_run_predict(const struct PvmRun *run,
                               const double *input,
                               size_t batch,
                               size_t channels,
                               size_t height,
                               size_t width,
                               uint32_t *labels,
                               size_t labels_len);

/**
 * Number of classes the run's model predicts.
 *
 * # Safety
 * `run` must be null or come from this library.
 */
size_t pvm_run_num_classes(const struct PvmRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PREVMATCH_H */
