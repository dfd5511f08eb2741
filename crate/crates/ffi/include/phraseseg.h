#ifndef PHRASESEG_H
#define PHRASESEG_H

/* This file is generated by cbindgen from phraseseg-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of a fallible call.
 */
typedef enum PsStatus {
  PS_STATUS_OK = 0,
  PS_STATUS_NULL_ARGUMENT = 1,
  PS_STATUS_INVALID_ARGUMENT = 2,
  PS_STATUS_PARSE_ERROR = 3,
  PS_STATUS_IO_ERROR = 4,
  PS_STATUS_EVAL_ERROR = 5,
} PsStatus;

/**
 * A parsed description: tokens plus phrase targets. Opaque.
 */
typedef struct PsDescription PsDescription;

/**
 * Accumulated evaluation records. Opaque.
 */
typedef struct PsEvalRecords PsEvalRecords;

/**
 * Span, head, and target-ID count of one phrase.
 */
typedef struct PsPhrase {
  /**
   * First token of the span.
   */
  size_t start;
  /**
   * Last token of the span (inclusive).
   */
  size_t end;
  /**
   * Token whose query row produces the mask.
   */
  size_t head;
  /**
   * Number of target instance IDs.
   */
  size_t id_count;
  /**
   * Nonzero for the sentence-level sentinel.
   */
  uint8_t sentence_level;
} PsPhrase;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread. The pointer stays
 * valid until the next library call on the same thread.
 */
const char *ps_last_error_message(void);

/**
 * Library version as a static string; do not free.
 */
const char *ps_version(void);

/**
 * Release a string returned by this library.
 *
 * # Safety
 * `text` must be a pointer previously returned through an out-parameter
 * of this library, not yet freed; NULL is accepted and ignored.
 */
void ps_string_free(char *text);

/**
 * Parse tagged interchange text (`... [phrase](id,id) ...`).
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PsStatus ps_description_parse(const char *text, struct PsDescription **out);

/**
 * # Safety
 * `desc` must come from [`ps_description_parse`] and not be freed twice.
 */
void ps_description_free(struct PsDescription *desc);

/**
 * # Safety
 * `desc` must be a live handle.
 */
size_t ps_description_token_count(const struct PsDescription *desc);

/**
 * # Safety
 * `desc` must be a live handle.
 */
size_t ps_description_phrase_count(const struct PsDescription *desc);

/**
 * Copy out one token as a fresh string.
 *
 * # Safety
 * `desc` must be a live handle and `out` a valid pointer.
 */
enum PsStatus ps_description_token(const struct PsDescription *desc, size_t index, char **out);

/**
 * Span and head of one phrase.
 *
 * # Safety
 * `desc` must be a live handle and `out` a valid pointer.
 */
enum PsStatus ps_description_phrase(const struct PsDescription *desc,
                                    size_t index,
                                    struct PsPhrase *out);

/**
 * Copy one phrase's target IDs (ascending) into `buffer`.
 *
 * # Safety
 * `desc` must be a live handle; `buffer` must hold `capacity` entries;
 * `written` must be a valid pointer.
 */
enum PsStatus ps_description_phrase_ids(const struct PsDescription *desc,
                                        size_t index,
                                        uint32_t *buffer,
                                        size_t capacity,
                                        size_t *written);

/**
 * Serialize back to canonical tagged text.
 *
 * # Safety
 * `desc` must be a live handle and `out` a valid pointer.
 */
enum PsStatus ps_description_serialize(const struct PsDescription *desc, char **out);

/**
 * Intersection-over-union of two 0/1 masks of equal length. Two empty
 * masks count as IoU 1.
 *
 * # Safety
 * `a` and `b` must each point to `len` readable bytes; `out` must be a
 * valid pointer.
 */
enum PsStatus ps_point_iou(const uint8_t *a, const uint8_t *b, size_t len, double *out);

struct PsEvalRecords *ps_eval_records_new(void);

/**
 * # Safety
 * `records` must come from [`ps_eval_records_new`] and not be freed twice.
 */
void ps_eval_records_free(struct PsEvalRecords *records);

/**
 * Append one description's per-phrase IoUs with its subset flags.
 *
 * # Safety
 * `records` must be a live handle; `ious` must point to `count` values.
 */
enum PsStatus ps_eval_records_push(struct PsEvalRecords *records,
                                   const double *ious,
                                   size_t count,
                                   uint8_t is_long,
                                   uint8_t is_complex);

/**
 * Flat phrase-level mean IoU.
 *
 * # Safety
 * `records` must be a live handle and `out` a valid pointer.
 */
enum PsStatus ps_metrics_miou(const struct PsEvalRecords *records, double *out);

/**
 * Mean of per-description mean IoUs.
 *
 * # Safety
 * `records` must be a live handle and `out` a valid pointer.
 */
enum PsStatus ps_metrics_miou_s(const struct PsEvalRecords *records, double *out);

/**
 * Fraction of phrases with IoU strictly above the threshold.
 *
 * # Safety
 * `records` must be a live handle and `out` a valid pointer.
 */
enum PsStatus ps_metrics_acc_at(const struct PsEvalRecords *records, double threshold, double *out);

/**
 * Full subset report (Overall plus non-empty Long/Complex) as JSON.
 *
 * # Safety
 * `records` must be a live handle and `out` a valid pointer.
 */
enum PsStatus ps_metrics_report_json(const struct PsEvalRecords *records, char **out);

/**
 * Corpus statistics of a record file, as JSON.
 *
 * # Safety
 * `records_path` must be a NUL-terminated path and `out` a valid pointer.
 */
enum PsStatus ps_dataset_stats_json(const char *records_path, char **out);

/**
 * Evaluate a checkpoint on a dataset directory (`records.jsonl` +
 * `scenes/`) and return the metrics report as JSON. `run_config_json`
 * may be NULL for defaults.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be a valid pointer.
 */
enum PsStatus ps_evaluate_dataset(const char *data_dir,
                                  const char *ckpt_path,
                                  const char *run_config_json,
                                  char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PHRASESEG_H */
