#ifndef LEXISCOPE_H
#define LEXISCOPE_H

#include <stddef.h>
#include <stdint.h>

typedef enum LxStatus {
  LX_STATUS_OK = 0,
  LX_STATUS_NULL_POINTER = 1,
  LX_STATUS_INVALID_ARGUMENT = 2,
  LX_STATUS_BUFFER_TOO_SMALL = 3,
  LX_STATUS_CONFIG_ERROR = 4,
  LX_STATUS_DATA_ERROR = 5,
  LX_STATUS_INTERNAL_ERROR = 6,
  LX_STATUS_PANIC = 7,
} LxStatus;

/*
 Opaque model checkpoint.
 */
typedef struct LxModel LxModel;

/*
 Opaque tokenizer vocabulary.
 */
typedef struct LxVocab LxVocab;

typedef struct LxModelDims {
  size_t d_model;
  size_t n_layers;
  size_t n_heads;
  size_t vocab_size;
  size_t max_seq;
} LxModelDims;

typedef struct LxTTest {
  double t_stat;
  double df;
  double p_greater;
  double p_less;
} LxTTest;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or null. Valid until the
 next lexiscope call on the same thread.
 */
const char *lx_last_error_message(void);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum LxStatus lx_vocab_load(const char *path, struct LxVocab **out);

/*
 # Safety
 `vocab` must come from [`lx_vocab_load`] and not have been freed. Null is
 ignored.
 */
void lx_vocab_free(struct LxVocab *vocab);

/*
 Number of tokens, or 0 for a null handle.

 # Safety
 `vocab` must be null or a live handle.
 */
size_t lx_vocab_size(const struct LxVocab *vocab);

/*
 Encodes NUL-terminated UTF-8 `text` into `out_ids`.

 # Safety
 `text` must be NUL-terminated; `out_ids` must have room for `cap` ids.
 */
enum LxStatus lx_encode(const struct LxVocab *vocab,
                        const char *text,
                        uint32_t *out_ids,
                        size_t cap,
                        size_t *out_len);

/*
 Decodes `ids` into `out` as NUL-terminated text. `out_len` receives the
 byte length without the terminator.

 # Safety
 `ids` must hold `n_ids` values; `out` must have room for `cap` bytes.
 */
enum LxStatus lx_decode(const struct LxVocab *vocab,
                        const uint32_t *ids,
                        size_t n_ids,
                        char *out,
                        size_t cap,
                        size_t *out_len);

/*
 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum LxStatus lx_model_load(const char *path, struct LxModel **out);

/*
 # Safety
 `model` must come from [`lx_model_load`] and not have been freed. Null is
 ignored.
 */
void lx_model_free(struct LxModel *model);

/*
 # Safety
 `model` must be a live handle and `out` writable.
 */
enum LxStatus lx_model_dims(const struct LxModel *model, struct LxModelDims *out);

/*
 Residual stream at `position` for layers 0..=n_layers, written row-major
 as `(n_layers + 1) * d_model` doubles.

 # Safety
 `ids` must hold `n_ids` values; `out` must have room for `cap` doubles.
 */
enum LxStatus lx_hidden_states(const struct LxModel *model,
                               const uint32_t *ids,
                               size_t n_ids,
                               size_t position,
                               double *out,
                               size_t cap,
                               size_t *out_len);

/*
 Top-1 token of the input-embedding lens at `position` for every layer
 0..=n_layers.

 # Safety
 `ids` must hold `n_ids` values; `out_ids` must have room for `cap` ids.
 */
enum LxStatus lx_lens_top1(const struct LxModel *model,
                           const uint32_t *ids,
                           size_t n_ids,
                           size_t position,
                           uint32_t *out_ids,
                           size_t cap,
                           size_t *out_len);

/*
 Orthogonal `T` (d×d, row-major) minimizing `‖H·T − X‖_F` for row-major
 `n×d` inputs.

 # Safety
 `h` and `x` must each hold `n * d` doubles; `out_t` must hold `d * d`.
 */
enum LxStatus lx_procrustes(const double *h, const double *x, size_t n, size_t d, double *out_t);

/*
 Welch's t-test of `a` against `b` with both one-sided p-values.

 # Safety
 `a` and `b` must hold `n_a` and `n_b` doubles; `out` must be writable.
 */
enum LxStatus lx_welch_t_test(const double *a,
                              size_t n_a,
                              const double *b,
                              size_t n_b,
                              struct LxTTest *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LEXISCOPE_H */
