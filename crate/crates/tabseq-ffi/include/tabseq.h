/* C interface for the tabseq table-sequence encoder library. */

#ifndef TABSEQ_H
#define TABSEQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Table-encoder execution schedule for inference.
 */
typedef enum TsqSchedule {
  TSQ_SCHEDULE_NAIVE = 0,
  TSQ_SCHEDULE_WAVEFRONT = 1,
} TsqSchedule;

/**
 * Call outcome. Anything but `Ok` leaves a message in `tsq_last_error`.
 */
typedef enum TsqStatus {
  TSQ_STATUS_OK = 0,
  /**
   * A pointer argument was null or a string was not valid UTF-8/JSON.
   */
  TSQ_STATUS_INVALID_ARGUMENT = 1,
  /**
   * The file could not be read.
   */
  TSQ_STATUS_IO_ERROR = 2,
  /**
   * The file or payload was readable but malformed.
   */
  TSQ_STATUS_FORMAT_ERROR = 3,
  /**
   * Any other failure, including caught panics.
   */
  TSQ_STATUS_INTERNAL_ERROR = 4,
} TsqStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct TsqModel TsqModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message for the current thread; empty when no error occurred.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *tsq_last_error(void);

/**
 * Library version as a static string.
 */
const char *tsq_version(void);

/**
 * Load a checkpoint file into a model handle. On success `*out_model`
 * owns the model; release it with `tsq_model_free`.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out_model` a valid
 * pointer.
 */
enum TsqStatus tsq_model_load(const char *path, struct TsqModel **out_model);

/**
 * Release a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be a pointer returned by `tsq_model_load`, at most once.
 */
void tsq_model_free(struct TsqModel *model);

/**
 * Release a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must be a pointer produced by this library, at most once.
 */
void tsq_string_free(char *s);

/**
 * Decode entities and relations for one sentence.
 *
 * `tokens_json` is a JSON array of token strings. On success `*out_json`
 * holds `{"entities": [...], "relations": [...]}`.
 *
 * # Safety
 * All pointers must be valid; `out_json` receives an owned string.
 */
enum TsqStatus tsq_predict_json(const struct TsqModel *model,
                                const char *tokens_json,
                                enum TsqSchedule schedule,
                                char **out_json);

/**
 * Apply the trained prediction heads to every encoder layer.
 *
 * On success `*out_json` holds
 * `{"layers": [{"layer": 1, "entities": [...], "relations": [...]}, ...]}`.
 *
 * # Safety
 * All pointers must be valid; `out_json` receives an owned string.
 */
enum TsqStatus tsq_probe_json(const struct TsqModel *model,
                              const char *tokens_json,
                              enum TsqSchedule schedule,
                              char **out_json);

/**
 * Export per-layer, per-head attention weight matrices.
 *
 * On success `*out_json` holds `{"layers": [{"heads": [[[...]]]}, ...]}`;
 * each head is a row-major N×N matrix whose rows sum to one.
 *
 * # Safety
 * All pointers must be valid; `out_json` receives an owned string.
 */
enum TsqStatus tsq_export_attention_json(const struct TsqModel *model,
                                         const char *tokens_json,
                                         enum TsqSchedule schedule,
                                         char **out_json);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* TABSEQ_H */
