#ifndef CPLAB_H
#define CPLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CplabStatus {
  CPLAB_STATUS_OK = 0,
  CPLAB_STATUS_NULL_ARGUMENT = 1,
  CPLAB_STATUS_INVALID_UTF8 = 2,
  CPLAB_STATUS_CONFIG = 3,
  CPLAB_STATUS_USAGE = 4,
  CPLAB_STATUS_NUMERIC = 5,
  CPLAB_STATUS_TENSOR = 6,
  CPLAB_STATUS_IO = 7,
  CPLAB_STATUS_ABORTED = 8,
  CPLAB_STATUS_BUFFER_TOO_SMALL = 9,
  CPLAB_STATUS_PANIC = 10,
} CplabStatus;

typedef struct CplabFisher CplabFisher;

typedef struct CplabModel CplabModel;

typedef struct CplabTokenizer CplabTokenizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Thread-local message of the last failed call; empty after a success.
 Valid until the next call on this thread.
 */
const char *cplab_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *cplab_version(void);

/*
 Trains a byte-level BPE tokenizer. `vocab_size` counts byte tokens and
 merges; the two special tokens come on top.

 # Safety
 `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CplabStatus cplab_tokenizer_train(const char *text,
                                       size_t vocab_size,
                                       uint64_t min_frequency,
                                       uint64_t seed,
                                       struct CplabTokenizer **out);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CplabStatus cplab_tokenizer_load(const char *path, struct CplabTokenizer **out);

/*
 # Safety
 `tok` must come from this library and `path` be a NUL-terminated string.
 */
enum CplabStatus cplab_tokenizer_save(const struct CplabTokenizer *tok, const char *path);

/*
 Total vocabulary size including the special tokens; 0 for a null handle.

 # Safety
 `tok` must be null or come from this library.
 */
size_t cplab_tokenizer_vocab_size(const struct CplabTokenizer *tok);

/*
 Encodes `text` into `ids`. The required length is always stored in
 `out_len`; if it exceeds `capacity` nothing is written and
 `BufferTooSmall` is returned.

 # Safety
 `ids` must have room for `capacity` values, or be null when `capacity`
 is 0.
 */
enum CplabStatus cplab_tokenizer_encode(const struct CplabTokenizer *tok,
                                        const char *text,
                                        uint32_t *ids,
                                        size_t capacity,
                                        size_t *out_len);

/*
 # Safety
 `tok` must be null or come from this library, and not be used again.
 */
void cplab_tokenizer_free(struct CplabTokenizer *tok);

/*
 Fresh model from a named preset such as `mini-causal`, sized to the
 tokenizer's vocabulary.

 # Safety
 `preset` must be a NUL-terminated string, `tok` a handle from this
 library and `out` a valid pointer.
 */
enum CplabStatus cplab_model_init(const char *preset,
                                  const struct CplabTokenizer *tok,
                                  uint64_t seed,
                                  struct CplabModel **out);

/*
 Loads a model checkpoint directory.

 # Safety
 `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CplabStatus cplab_model_load(const char *dir, struct CplabModel **out);

/*
 # Safety
 `model` must come from this library and `dir` be a NUL-terminated string.
 */
enum CplabStatus cplab_model_save(const struct CplabModel *model, const char *dir);

/*
 Number of scalar parameters; 0 for a null handle.

 # Safety
 `model` must be null or come from this library.
 */
size_t cplab_model_param_count(const struct CplabModel *model);

/*
 Context length in tokens; 0 for a null handle.

 # Safety
 `model` must be null or come from this library.
 */
size_t cplab_model_context(const struct CplabModel *model);

/*
 Log-probability of a token sequence in nats: summed next-token
 log-probabilities for causal models, pseudo-log-likelihood for masked
 ones.

 # Safety
 `ids` must point to `len` values and `out` be a valid pointer.
 */
enum CplabStatus cplab_model_sequence_logprob(const struct CplabModel *model,
                                              const uint32_t *ids,
                                              size_t len,
                                              double *out);

/*
 Encodes `text` and scores it as [`cplab_model_sequence_logprob`] does.

 # Safety
 Handles must come from this library, `text` be a NUL-terminated string
 and `out` a valid pointer.
 */
enum CplabStatus cplab_model_text_logprob(const struct CplabModel *model,
                                          const struct CplabTokenizer *tok,
                                          const char *text,
                                          double *out);

/*
 # Safety
 `model` must be null or come from this library, and not be used again.
 */
void cplab_model_free(struct CplabModel *model);

/*
 Diagonal Fisher and anchor at the model's current parameters, estimated
 on `text` cut into context-length blocks, with the `desk` EWC settings
 apart from `subset_blocks` and `seed`.

 # Safety
 Handles must come from this library, `text` be a NUL-terminated string
 and `out` a valid pointer.
 */
enum CplabStatus cplab_fisher_estimate(const struct CplabModel *model,
                                       const struct CplabTokenizer *tok,
                                       const char *text,
                                       size_t subset_blocks,
                                       uint64_t seed,
                                       struct CplabFisher **out);

/*
 Loads a Fisher snapshot saved under `stem`, checking it matches the
 model's parameter count.

 # Safety
 `stem` must be a NUL-terminated string, `model` a handle from this
 library and `out` a valid pointer.
 */
enum CplabStatus cplab_fisher_load(const char *stem,
                                   const struct CplabModel *model,
                                   struct CplabFisher **out);

/*
 # Safety
 `fisher` must come from this library and `stem` be a NUL-terminated
 string.
 */
enum CplabStatus cplab_fisher_save(const struct CplabFisher *fisher, const char *stem);

/*
 Copies the Fisher diagonal into `values`, which must hold
 `cplab_model_param_count` entries.

 # Safety
 `values` must have room for `capacity` values.
 */
enum CplabStatus cplab_fisher_values(const struct CplabFisher *fisher,
                                     double *values,
                                     size_t capacity);

/*
 `lambda * sum F (theta - theta*)^2 + mu * sum theta^2` at the model's
 parameters.

 # Safety
 Handles must come from this library and `out` be a valid pointer.
 */
enum CplabStatus cplab_ewc_penalty(const struct CplabModel *model,
                                   const struct CplabFisher *fisher,
                                   double lambda,
                                   double mu,
                                   double *out);

/*
 # Safety
 `fisher` must be null or come from this library, and not be used again.
 */
void cplab_fisher_free(struct CplabFisher *fisher);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPLAB_H */
