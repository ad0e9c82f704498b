#ifndef TIMEFUSE_H
#define TIMEFUSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum TfStatus {
  TF_STATUS_OK = 0,
  TF_STATUS_NULL_ARGUMENT = 1,
  TF_STATUS_INVALID_UTF8 = 2,
  TF_STATUS_INVALID_INPUT = 3,
  TF_STATUS_SHAPE = 4,
  TF_STATUS_DEGENERATE_STATS = 5,
  TF_STATUS_ALIGNMENT = 6,
  TF_STATUS_LOOKUP = 7,
  TF_STATUS_UNDEFINED_METRIC = 8,
  TF_STATUS_MISSING_DEPENDENCY = 9,
  TF_STATUS_CORRUPT_CHECKPOINT = 10,
  TF_STATUS_INVALID_CONFIG = 11,
  TF_STATUS_IO = 12,
  TF_STATUS_SERIALIZATION = 13,
  TF_STATUS_BUFFER_TOO_SMALL = 14,
  TF_STATUS_PANIC = 15,
} TfStatus;

// Resolved run configuration.
typedef struct TfConfig TfConfig;

// Generated or loaded corpus.
typedef struct TfCorpus TfCorpus;

// Stage-2 model with the session statistics it was trained with.
typedef struct TfModel TfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. Valid
// until the next failing call on the same thread.
const char *tf_last_error_message(void);

// Library version as a static string.
const char *tf_version(void);

// Releases a string returned by the library.
//
// # Safety
// `s` must come from this library and not be freed twice.
void tf_string_free(char *s);

// Creates a configuration from a preset name ("desk" or "paper-scale").
//
// # Safety
// `preset` must be a valid NUL-terminated string; `out` must be writable.
enum TfStatus tf_config_new(const char *preset, struct TfConfig **out);

// Applies one `key.path=value` override and revalidates.
//
// # Safety
// `cfg` must be a live handle; `assignment` a valid NUL-terminated string.
enum TfStatus tf_config_set(struct TfConfig *cfg, const char *assignment);

// The effective configuration as pretty-printed JSON.
//
// # Safety
// `cfg` must be a live handle; release `*out` with `tf_string_free`.
enum TfStatus tf_config_json(const struct TfConfig *cfg, char **out);

// # Safety
// `cfg` must come from `tf_config_new` and not be freed twice.
void tf_config_free(struct TfConfig *cfg);

// Generates the corpus of `seed` under `cfg`.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum TfStatus tf_corpus_generate(const struct TfConfig *cfg, uint64_t seed, struct TfCorpus **out);

// # Safety
// `dir` must be a valid NUL-terminated path; `out` must be writable.
enum TfStatus tf_corpus_load(const char *dir, struct TfCorpus **out);

// # Safety
// `corpus` must be a live handle; `dir` a valid NUL-terminated path.
enum TfStatus tf_corpus_save(const struct TfCorpus *corpus, const char *dir);

// Aligned window groups across all splits; 0 for a null handle.
//
// # Safety
// `corpus` must be null or a live handle.
size_t tf_corpus_num_windows(const struct TfCorpus *corpus);

// # Safety
// `corpus` must be null or a live handle.
size_t tf_corpus_num_modalities(const struct TfCorpus *corpus);

// # Safety
// `corpus` must come from this library and not be freed twice.
void tf_corpus_free(struct TfCorpus *corpus);

// Loads the Stage-2 checkpoint `name` under `root`, resolving its Stage-1
// dependencies from the same root.
//
// # Safety
// `root` and `name` must be valid NUL-terminated strings; `out` writable.
enum TfStatus tf_model_load(const char *root, const char *name, struct TfModel **out);

// Width of one fused embedding (two concatenated CLS vectors).
//
// # Safety
// `model` must be null or a live handle.
size_t tf_model_embedding_width(const struct TfModel *model);

// 1 if the model carries the time-conditioning path, 0 otherwise.
//
// # Safety
// `model` must be null or a live handle.
int32_t tf_model_is_time_aware(const struct TfModel *model);

// Frozen fused embeddings of every window group in `corpus` (train, then
// validation, then test), row-major into `out`. `*rows` receives the row
// count. With a null `out` or a `capacity` (in floats) below
// `rows * width`, nothing is written and `TF_STATUS_BUFFER_TOO_SMALL` is
// returned with `*rows` set.
//
// # Safety
// Handles must be live; `out` must hold `capacity` floats; `rows` writable.
enum TfStatus tf_model_embed(const struct TfModel *model,
                             const struct TfCorpus *corpus,
                             size_t first,
                             size_t second,
                             float *out,
                             size_t capacity,
                             size_t *rows);

// # Safety
// `model` must come from this library and not be freed twice.
void tf_model_free(struct TfModel *model);

// Area under the ROC curve of `scores` against 0/1 `labels`, ties counted
// as one half.
//
// # Safety
// `scores` and `labels` must hold `n` elements; `out` must be writable.
enum TfStatus tf_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

// Runs the time-aware vs baseline comparison for every configured seed and
// writes the mean AUROC gain in points.
//
// # Safety
// `cfg` must be a live handle; `gain` must be writable.
enum TfStatus tf_compare_time_aware(const struct TfConfig *cfg, double *gain);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TIMEFUSE_H */
