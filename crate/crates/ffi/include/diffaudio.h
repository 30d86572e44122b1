#ifndef DIFFAUDIO_H
#define DIFFAUDIO_H

#include <stddef.h>
#include <stdint.h>

typedef enum DaStatus {
  DA_STATUS_OK = 0,
  DA_STATUS_NULL_POINTER = 1,
  DA_STATUS_INVALID_ARGUMENT = 2,
  DA_STATUS_SHAPE_MISMATCH = 3,
  DA_STATUS_IO = 4,
  DA_STATUS_FORMAT = 5,
  DA_STATUS_NUMERIC = 6,
  DA_STATUS_PANIC = 7,
} DaStatus;

typedef enum DaPreset {
  DA_PRESET_PAPER = 0,
  DA_PRESET_DESK = 1,
} DaPreset;

/*
 Opaque model handle: parameters plus the run configuration.
 */
typedef struct DaModel DaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failure on this thread, or null. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *da_last_error(void);

/*
 Library version as a static nul-terminated string.
 */
const char *da_version(void);

/*
 Freshly initialised model for a [`DaPreset`] value.

 # Safety
 `out` must be a valid pointer.
 */
enum DaStatus da_model_new(uint32_t preset, uint64_t seed, struct DaModel **out);

/*
 Loads a checkpoint directory. Teacher tensors, if present, are dropped.

 # Safety
 `dir` must be a nul-terminated string and `out` a valid pointer.
 */
enum DaStatus da_model_load(const char *dir, struct DaModel **out);

/*
 # Safety
 `model` must be a live handle and `dir` a nul-terminated string.
 */
enum DaStatus da_model_save(const struct DaModel *model, const char *dir);

/*
 Releases a handle. Null is ignored.

 # Safety
 `model` must be null or a handle not yet freed.
 */
void da_model_free(struct DaModel *model);

/*
 Embedding width of the model.

 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum DaStatus da_model_dim(const struct DaModel *model, size_t *out);

/*
 Number of classifier outputs, or 0 when the model has no head.

 # Safety
 `model` must be a live handle and `out` a valid pointer.
 */
enum DaStatus da_model_num_classes(const struct DaModel *model, size_t *out);

/*
 Clip embedding (the CLS output) of `n` mono samples into `out[dim]`.

 # Safety
 `samples` must hold `n` values and `out` room for `out_len`.
 */
enum DaStatus da_model_embed(const struct DaModel *model,
                             const float *samples,
                             size_t n,
                             uint32_t sample_rate,
                             float *out,
                             size_t out_len);

/*
 Classifier logits into `out[num_classes]`.

 # Safety
 `samples` must hold `n` values and `out` room for `out_len`.
 */
enum DaStatus da_model_classify(const struct DaModel *model,
                                const float *samples,
                                size_t n,
                                uint32_t sample_rate,
                                float *out,
                                size_t out_len);

/*
 Frames produced for `n_samples` samples at the default frontend settings.

 # Safety
 `out` must be a valid pointer.
 */
enum DaStatus da_fbank_frames(size_t n_samples, size_t *out);

/*
 Log-mel fbank with default settings, row-major `frames x mels`.

 # Safety
 `samples` must hold `n` values, `out` room for `out_len`, and `frames`
 and `mels` must be valid pointers.
 */
enum DaStatus da_fbank_compute(const float *samples,
                               size_t n,
                               uint32_t sample_rate,
                               float *out,
                               size_t out_len,
                               size_t *frames,
                               size_t *mels);

/*
 Differential attention weights for `n` queries and `m` keys of width `d`.
 Inputs are row-major; each output is `n x m`.

 # Safety
 Inputs must hold `n*d` (queries) or `m*d` (keys) values and outputs
 `n*m` values.
 */
enum DaStatus da_diff_attention_weights(const double *q1,
                                        const double *k1,
                                        const double *q2,
                                        const double *k2,
                                        size_t n,
                                        size_t m,
                                        size_t d,
                                        double lambda,
                                        double *a1,
                                        double *a2,
                                        double *a);

/*
 Mean average precision over the classes with at least one positive.
 `labels` entries must be 0 or 1.

 # Safety
 `scores` and `labels` must hold `n*c` values; `out` must be valid.
 */
enum DaStatus da_mean_average_precision(const double *scores,
                                        const uint8_t *labels,
                                        size_t n,
                                        size_t c,
                                        double *out);

/*
 Fraction of positions where `pred` equals `truth`.

 # Safety
 `pred` and `truth` must hold `n` values; `out` must be valid.
 */
enum DaStatus da_accuracy(const size_t *pred, const size_t *truth, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIFFAUDIO_H */
