#ifndef PROTO_REFINE_H
#define PROTO_REFINE_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Outcome of a fallible call. Codes 1 to 3 match the command-line exit codes.
typedef enum PrStatus {
  PR_STATUS_OK = 0,
  // Bad or inconsistent input data.
  PR_STATUS_DATA_ERROR = 1,
  // Invalid configuration or parameters.
  PR_STATUS_CONFIG_ERROR = 2,
  // Bug, broken numerical state or a caught panic.
  PR_STATUS_INTERNAL_ERROR = 3,
  // Null pointer or non UTF-8 string argument.
  PR_STATUS_INVALID_ARGUMENT = 4,
} PrStatus;

// Hyperparameters and stage toggles, parsed from the pipeline config JSON.
typedef struct PrConfig PrConfig;

// Trained classifier head.
typedef struct PrHead PrHead;

// Per-patch labels and scores of one slide.
typedef struct PrLabels PrLabels;

// Local or global prototype set.
typedef struct PrPrototypes PrPrototypes;

// One slide: patch grid, coarse labels and embeddings.
typedef struct PrSlide PrSlide;

// Confusion counts and metrics; undefined ratios are NaN.
typedef struct PrMetrics {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_count;
  uint64_t tn;
  double dice;
  double iou;
  double f1;
  double ppv;
  double npv;
  double tpr;
  double tnr;
  double accuracy;
} PrMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
//
// The pointer stays valid until the next call on this thread.
const char *pr_last_error_message(void);

// Default hyperparameters with every stage enabled.
enum PrStatus pr_config_default(struct PrConfig **out);

// Parses a pipeline config JSON document; omitted fields take defaults.
enum PrStatus pr_config_from_json(const char *json, struct PrConfig **out);

void pr_config_free(struct PrConfig *config);

// Loads a slide from its manifest (.jsonl) and embedding file (.pemb).
enum PrStatus pr_slide_load(const char *manifest_path,
                            const char *embedding_path,
                            struct PrSlide **out);

enum PrStatus pr_slide_save(const struct PrSlide *slide,
                            const char *manifest_path,
                            const char *embedding_path);

// Number of patches; 0 for a null handle.
size_t pr_slide_len(const struct PrSlide *slide);

// Embedding dimension; 0 for a null handle.
size_t pr_slide_dim(const struct PrSlide *slide);

// The coarse annotation as a label table.
enum PrStatus pr_slide_coarse_labels(const struct PrSlide *slide, struct PrLabels **out);

void pr_slide_free(struct PrSlide *slide);

// Clusters a slide into `c_local` local prototypes with the given k-means seed.
enum PrStatus pr_prototypes_extract_local(const struct PrSlide *slide,
                                          const struct PrConfig *config,
                                          uint64_t seed,
                                          struct PrPrototypes **out);

// Clusters `n` local sets into `k_global` global prototypes, seeded by the config seed.
enum PrStatus pr_prototypes_aggregate(const struct PrPrototypes *const *locals,
                                      size_t n,
                                      const struct PrConfig *config,
                                      struct PrPrototypes **out);

// Loads a prototype `.pemb` file and its `.json` sidecar.
enum PrStatus pr_prototypes_load(const char *path, struct PrPrototypes **out);

enum PrStatus pr_prototypes_save(const struct PrPrototypes *set, const char *path);

// Number of prototypes; 0 for a null handle.
size_t pr_prototypes_len(const struct PrPrototypes *set);

// Prototype dimension; 0 for a null handle.
size_t pr_prototypes_dim(const struct PrPrototypes *set);

void pr_prototypes_free(struct PrPrototypes *set);

// Pseudo-labels a slide against a prototype set.
enum PrStatus pr_pseudo_label(const struct PrSlide *slide,
                              const struct PrPrototypes *prototypes,
                              const struct PrConfig *config,
                              struct PrLabels **out);

// Loads a label table CSV for the named slide.
enum PrStatus pr_labels_load(const char *path, const char *slide_id, struct PrLabels **out);

enum PrStatus pr_labels_save(const struct PrLabels *labels, const char *path);

// Number of entries; 0 for a null handle.
size_t pr_labels_len(const struct PrLabels *labels);

// Number of positive entries; 0 for a null handle.
size_t pr_labels_positive_count(const struct PrLabels *labels);

// Label and score of entry `index`, in slide order.
enum PrStatus pr_labels_get(const struct PrLabels *labels,
                            size_t index,
                            uint8_t *label,
                            float *score);

void pr_labels_free(struct PrLabels *labels);

// Trains a head on one slide, honouring the config's sampling and re-finetuning toggles.
//
// `out_predictions` may be null; otherwise it receives the final per-patch predictions.
enum PrStatus pr_train(const struct PrSlide *slide,
                       const struct PrLabels *labels,
                       const struct PrConfig *config,
                       struct PrHead **out_head,
                       struct PrLabels **out_predictions);

// Labels each patch 1 iff the head's probability is at least `threshold`.
enum PrStatus pr_head_predict(const struct PrHead *head,
                              const struct PrSlide *slide,
                              double threshold,
                              struct PrLabels **out);

// Writes the head JSON, tagged with the hash of `config`.
enum PrStatus pr_head_save(const struct PrHead *head,
                           const struct PrConfig *config,
                           const char *path);

enum PrStatus pr_head_load(const char *path, struct PrHead **out);

// Input dimension; 0 for a null handle.
size_t pr_head_dim(const struct PrHead *head);

void pr_head_free(struct PrHead *head);

// Compares predicted labels with ground truth over the same patches.
enum PrStatus pr_metrics(const struct PrLabels *predicted,
                         const struct PrLabels *truth,
                         struct PrMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTO_REFINE_H */
