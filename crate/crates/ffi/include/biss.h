#ifndef BISS_H
#define BISS_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BissStatus {
  BISS_STATUS_OK = 0,
  BISS_STATUS_NULL_POINTER = 1,
  BISS_STATUS_INVALID_UTF8 = 2,
  BISS_STATUS_INVALID_ARGUMENT = 3,
  BISS_STATUS_IO = 4,
  BISS_STATUS_VOCAB_MISMATCH = 5,
  BISS_STATUS_NUMERIC = 6,
  BISS_STATUS_PANIC = 7,
} BissStatus;

/**
 * Loaded checkpoint and its vocabulary.
 */
typedef struct BissModel BissModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer stays
 * valid until the next call into this library from the same thread.
 */
const char *biss_last_error_message(void);

/**
 * Loads a checkpoint and the vocabulary it was trained with.
 */
enum BissStatus biss_model_load(const char *checkpoint_path,
                                const char *vocab_path,
                                struct BissModel **out);

void biss_model_free(struct BissModel *model);

/**
 * Number of trainable values in the model, or 0 for NULL.
 */
size_t biss_model_num_parameters(const struct BissModel *model);

/**
 * Greedy reply to `prompt`. On success `*out` holds a string to release with
 * [`biss_string_free`].
 */
enum BissStatus biss_model_generate(const struct BissModel *model, const char *prompt, char **out);

void biss_string_free(char *s);

/**
 * Unsmoothed sentence BLEU of order `order` (1 to 4).
 */
enum BissStatus biss_sentence_bleu(const uint32_t *candidate,
                                   size_t candidate_len,
                                   const uint32_t *reference,
                                   size_t reference_len,
                                   uint32_t order,
                                   double *out);

/**
 * Corpus BLEU. Writes cumulative BLEU-1..4 to `bleu_out[0..4]`; when
 * `precision_out` is not NULL the clipped precisions go to `precision_out[0..4]`.
 */
enum BissStatus biss_corpus_bleu(const uint32_t *const *candidates,
                                 const size_t *candidate_lens,
                                 const uint32_t *const *references,
                                 const size_t *reference_lens,
                                 size_t count,
                                 double *bleu_out,
                                 double *precision_out);

/**
 * Corpus-wide Distinct-n.
 */
enum BissStatus biss_distinct(const uint32_t *const *candidates,
                              const size_t *candidate_lens,
                              size_t count,
                              uint32_t n,
                              double *out);

/**
 * `1 / (1 + exp(-k (x - b)))`
 */
double biss_smooth_sigmoid(double x, double k, double b);

/**
 * `x` clamped to [0, 1].
 */
double biss_smooth_clamp(double x);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BISS_H */
