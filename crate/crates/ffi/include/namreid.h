#ifndef NAMREID_H
#define NAMREID_H

#pragma once

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NrStatus {
  NR_STATUS_OK = 0,
  NR_STATUS_NULL_ARGUMENT = 1,
  NR_STATUS_INVALID_UTF8 = 2,
  NR_STATUS_CONTRACT = 3,
  NR_STATUS_NUMERIC_INPUT = 4,
  NR_STATUS_IO = 5,
  NR_STATUS_FORMAT = 6,
  NR_STATUS_CORRUPTION = 7,
  NR_STATUS_TRANSPORT = 8,
  /**
   * The caller's buffer is too small; the needed length was written.
   */
  NR_STATUS_BUFFER_TOO_SMALL = 9,
  NR_STATUS_PANIC = 10,
} NrStatus;

/**
 * Opaque dataset handle.
 */
typedef struct NrDataset NrDataset;

/**
 * Opaque handle to a trained (or freshly initialised) model.
 */
typedef struct NrModel NrModel;

/**
 * Retrieval metrics, all in [0, 1].
 */
typedef struct NrRetrieval {
  double rank1;
  double rank5;
  double rank10;
  double map;
} NrRetrieval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *nr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nr_version(void);

/**
 * Generates a synthetic corpus with the default attribute spec and the
 * shipped templates; other parameters take their defaults.
 *
 * # Safety
 * `out` must be a valid pointer to write a handle into.
 */
enum NrStatus nr_dataset_generate(size_t identities,
                                  double noise_rate,
                                  uint64_t seed,
                                  struct NrDataset **out);

/**
 * # Safety
 * `dir` is a NUL-terminated path; `out` a valid pointer.
 */
enum NrStatus nr_dataset_load(const char *dir, struct NrDataset **out);

/**
 * # Safety
 * `ds` is a live handle; `dir` a NUL-terminated path.
 */
enum NrStatus nr_dataset_save(const struct NrDataset *ds, const char *dir);

/**
 * Number of captions in the dataset, or 0 for a null handle.
 *
 * # Safety
 * `ds` is null or a live handle.
 */
size_t nr_dataset_caption_count(const struct NrDataset *ds);

/**
 * # Safety
 * `ds` is null or a handle from this library that has not been freed.
 */
void nr_dataset_free(struct NrDataset *ds);

/**
 * Trains a model. `config_json` is a run config as JSON, or null for the
 * defaults.
 *
 * # Safety
 * `ds` is a live handle; `config_json` null or NUL-terminated; `out` valid.
 */
enum NrStatus nr_model_train(const struct NrDataset *ds,
                             const char *config_json,
                             struct NrModel **out);

/**
 * # Safety
 * `dir` is a NUL-terminated path; `out` a valid pointer.
 */
enum NrStatus nr_model_load(const char *dir, struct NrModel **out);

/**
 * # Safety
 * `model` is a live handle; `dir` a NUL-terminated path.
 */
enum NrStatus nr_model_save(const struct NrModel *model, const char *dir);

/**
 * # Safety
 * `model` is null or a handle from this library that has not been freed.
 */
void nr_model_free(struct NrModel *model);

/**
 * Text-to-image retrieval on the test split (`test != 0`) or the train
 * split, with all captions or only the clean ones as queries.
 *
 * # Safety
 * Handles are live; `out` is valid.
 */
enum NrStatus nr_evaluate(const struct NrModel *model,
                          const struct NrDataset *ds,
                          bool test,
                          bool clean_queries,
                          struct NrRetrieval *out);

/**
 * Per-word masking probabilities r′ the model assigns to one caption.
 * Writes up to `cap` values into `buf` and the word count into `len`; when
 * `cap` is too small nothing is written to `buf` and `NR_STATUS_BUFFER_TOO_SMALL`
 * is returned.
 *
 * # Safety
 * Handles are live; `caption_id` is NUL-terminated; `buf` holds `cap`
 * doubles (may be null when `cap` is 0); `len` is valid.
 */
enum NrStatus nr_mask_probs(const struct NrModel *model,
                            const struct NrDataset *ds,
                            const char *caption_id,
                            double *buf,
                            size_t cap,
                            size_t *len);

/**
 * Recenters noise levels `r[0..n]` to masking probabilities with mean `p`
 * before clamping, writing them to `out[0..n]`.
 *
 * # Safety
 * `r` and `out` each hold `n` doubles.
 */
enum NrStatus nr_recenter(const double *r, size_t n, double p, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NAMREID_H */
