#ifndef HCAN_H
#define HCAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum HcanStatus {
  HCAN_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  HCAN_STATUS_NULL = 1,
  /**
   * An argument was out of range or not valid UTF-8.
   */
  HCAN_STATUS_INVALID_ARGUMENT = 2,
  HCAN_STATUS_IO = 3,
  /**
   * Malformed corpus, missing labels or checkpoint/corpus mismatch.
   */
  HCAN_STATUS_DATA = 4,
  HCAN_STATUS_CHECKPOINT = 5,
  HCAN_STATUS_DIMENSION = 6,
  HCAN_STATUS_NUMERIC = 7,
  /**
   * The library panicked; the handle involved should be discarded.
   */
  HCAN_STATUS_PANIC = 8,
} HcanStatus;

/**
 * Corpus directory loaded into memory.
 */
typedef struct HcanCorpus HcanCorpus;

/**
 * Trained model loaded from a checkpoint.
 */
typedef struct HcanModel HcanModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library on the same thread.
 */
const char *hcan_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hcan_version(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HcanStatus hcan_model_load(const char *path, struct HcanModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`hcan_model_load`] and not be used afterwards.
 */
void hcan_model_free(struct HcanModel *model);

/**
 * Utterance feature width expected by the model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum HcanStatus hcan_model_feature_dim(const struct HcanModel *model, size_t *out);

/**
 * Number of emotion classes.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum HcanStatus hcan_model_num_emotions(const struct HcanModel *model, size_t *out);

/**
 * Name of emotion `index` as a newly allocated string.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum HcanStatus hcan_model_label(const struct HcanModel *model, size_t index, char **out);

/**
 * Predicts one conversation of `n` utterances.
 *
 * `features` is row-major `n × feature_dim`, `speakers` holds one id per
 * utterance. `probs` receives `n × num_emotions` values of ŷ and `labels`
 * (may be null) the argmax per utterance.
 *
 * # Safety
 * Every non-null pointer must reference at least the stated number of
 * elements.
 */
enum HcanStatus hcan_model_predict(const struct HcanModel *model,
                                   const double *features,
                                   const uint32_t *speakers,
                                   size_t n,
                                   double *probs,
                                   uint32_t *labels);

/**
 * Loads a corpus directory (train required, val/test optional).
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HcanStatus hcan_corpus_load(const char *dir, struct HcanCorpus **out);

/**
 * Releases a corpus. Null is ignored.
 *
 * # Safety
 * `corpus` must come from [`hcan_corpus_load`] and not be used afterwards.
 */
void hcan_corpus_free(struct HcanCorpus *corpus);

/**
 * Corpus statistics as a JSON document.
 *
 * # Safety
 * `corpus` must be a live handle and `out` a valid pointer.
 */
enum HcanStatus hcan_corpus_stats_json(const struct HcanCorpus *corpus, char **out);

/**
 * Metrics of `model` on one split (0 train, 1 val, 2 test) as JSON.
 *
 * # Safety
 * Handles must be live and `out` a valid pointer.
 */
enum HcanStatus hcan_evaluate_json(const struct HcanModel *model,
                                   const struct HcanCorpus *corpus,
                                   uint32_t split,
                                   char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void hcan_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HCAN_H */
