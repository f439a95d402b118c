#ifndef CAPABLATE_H
#define CAPABLATE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call. The category codes match the
// command-line tool's exit codes.
typedef enum CapStatus {
  CAP_STATUS_OK = 0,
  CAP_STATUS_CONFIG_ERROR = 2,
  CAP_STATUS_DATA_ERROR = 3,
  CAP_STATUS_TRAINING_ERROR = 4,
  CAP_STATUS_INTERNAL_ERROR = 5,
  CAP_STATUS_NULL_POINTER = 6,
  CAP_STATUS_INVALID_STRING = 7,
  CAP_STATUS_PANIC = 8,
} CapStatus;

// Dataset split selector.
typedef enum CapSplit {
  CAP_SPLIT_TRAIN = 0,
  CAP_SPLIT_DEV = 1,
  CAP_SPLIT_TEST = 2,
} CapSplit;

// A trained set of low-rank adapters.
typedef struct CapAdapters CapAdapters;

// One task's train, dev and test examples.
typedef struct CapDataset CapDataset;

// A frozen pretrained model.
typedef struct CapModel CapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a
// successful call. The pointer stays valid until the next call into this
// library on the same thread.
const char *cap_last_error(void);

// Library version as a static NUL-terminated string.
const char *cap_version(void);

// Number of adapted projection sites per layer.
size_t cap_sites_per_layer(void);

// Loads a model checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum CapStatus cap_model_load(const char *path, struct CapModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or a handle from [`cap_model_load`] not yet freed.
void cap_model_free(struct CapModel *model);

// Number of transformer layers, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live model handle.
size_t cap_model_n_layers(const struct CapModel *model);

// Loads an adapter set. When `model` is non-null its dimensions must match
// the adapters'.
//
// # Safety
// `path` must be a NUL-terminated string, `model` null or live, `out`
// writable.
enum CapStatus cap_adapters_load(const char *path,
                                 const struct CapModel *model,
                                 struct CapAdapters **out);

// Writes an adapter set to disk.
//
// # Safety
// `adapters` must be a live handle and `path` a NUL-terminated string.
enum CapStatus cap_adapters_save(const struct CapAdapters *adapters, const char *path);

// Releases an adapter set. Null is ignored.
//
// # Safety
// `adapters` must be null or a handle from this library not yet freed.
void cap_adapters_free(struct CapAdapters *adapters);

// Writes the importance score of every component into `scores`, layer by
// layer with [`cap_sites_per_layer`] entries each. `len` must equal
// layers × sites.
//
// # Safety
// `adapters` must be live and `scores` must hold `len` doubles.
enum CapStatus cap_adapters_importance(const struct CapAdapters *adapters,
                                       double *scores,
                                       size_t len);

// Reads one task's splits from a data directory.
//
// # Safety
// `data_dir` and `task` must be NUL-terminated strings and `out` writable.
enum CapStatus cap_dataset_load(const char *data_dir, const char *task, struct CapDataset **out);

// Releases a dataset. Null is ignored.
//
// # Safety
// `dataset` must be null or a handle from [`cap_dataset_load`] not yet
// freed.
void cap_dataset_free(struct CapDataset *dataset);

// Number of examples in a split, or 0 for a null handle.
//
// # Safety
// `dataset` must be null or live.
size_t cap_dataset_len(const struct CapDataset *dataset, enum CapSplit split);

// Accuracy of the model, optionally with adapters, on one split.
//
// # Safety
// `model` and `dataset` must be live, `adapters` null or live, `out`
// writable.
enum CapStatus cap_accuracy(const struct CapModel *model,
                            const struct CapAdapters *adapters,
                            const struct CapDataset *dataset,
                            enum CapSplit split,
                            double *out);

// Perplexity on the held-out general corpus of a data directory.
//
// # Safety
// `model` must be live, `adapters` null or live, `data_dir` a
// NUL-terminated string and `out` writable.
enum CapStatus cap_perplexity(const struct CapModel *model,
                              const struct CapAdapters *adapters,
                              const char *data_dir,
                              double *out);

// Trains adapters that remove `dataset`'s task from the model, pairing
// target batches with the general corpus found in `data_dir`. `config_toml`
// may be null for the default settings. The final epoch's adapters are
// returned.
//
// # Safety
// `model` and `dataset` must be live, `data_dir` a NUL-terminated string,
// `config_toml` null or NUL-terminated, `out` writable.
enum CapStatus cap_ablate(const struct CapModel *model,
                          const struct CapDataset *dataset,
                          const char *data_dir,
                          const char *config_toml,
                          struct CapAdapters **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAPABLATE_H */
