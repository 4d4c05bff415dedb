#ifndef PLATELINE_H
#define PLATELINE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PlStatus {
  PL_STATUS_OK = 0,
  PL_STATUS_NULL_ARGUMENT = 1,
  PL_STATUS_INVALID_UTF8 = 2,
  PL_STATUS_INVALID_ARGUMENT = 3,
  PL_STATUS_NO_JSON = 4,
  PL_STATUS_MALFORMED = 5,
  PL_STATUS_SCHEMA_VIOLATION = 6,
  PL_STATUS_PANIC = 99,
} PlStatus;

// Confusion-matrix accumulator over a fixed class list.
typedef struct PlConfusion PlConfusion;

// Deterministic hashed bag-of-tokens embedder.
typedef struct PlEmbedder PlEmbedder;

// Parsed knowledge object.
typedef struct PlKnowledge PlKnowledge;

typedef struct PlRougeL {
  double recall;
  double precision;
  double f;
} PlRougeL;

typedef struct PlBox {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} PlBox;

typedef struct PlClassScore {
  double precision;
  double recall;
  double f1;
  uint64_t support;
} PlClassScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into this library on the same thread.
const char *pl_last_error_message(void);

// Static, NUL-terminated library version.
const char *pl_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed already.
void pl_string_free(char *s);

// Sentence BLEU-4, uniform weights, no smoothing.
//
// # Safety
// `references` must point to `n_references` NUL-terminated strings.
enum PlStatus pl_bleu(const char *candidate,
                      const char *const *references,
                      size_t n_references,
                      double *out);

// ROUGE-L with beta = 1.
//
// # Safety
// Pointers must be valid; strings NUL-terminated.
enum PlStatus pl_rouge_l(const char *candidate, const char *reference, struct PlRougeL *out);

// Writes `n` probabilities to `out`.
//
// # Safety
// `logits` and `out` must each hold `n` doubles.
enum PlStatus pl_softmax(const double *logits, size_t n, double *out);

// # Safety
// Pointers must be valid.
enum PlStatus pl_iou(const struct PlBox *a, const struct PlBox *b, double *out);

// # Safety
// Pointers must be valid.
enum PlStatus pl_ciou_loss(const struct PlBox *pred, const struct PlBox *gt, double *out);

// Prompt for `class_id` from the built-in structured template.
//
// # Safety
// `class_id` must be NUL-terminated; free `*out` with [`pl_string_free`].
enum PlStatus pl_build_prompt(const char *class_id, char **out);

// Hex cache key / prompt hash for one generation.
//
// # Safety
// Strings must be NUL-terminated; free `*out` with [`pl_string_free`].
enum PlStatus pl_prompt_hash(const char *template_version,
                             const char *provider_id,
                             const char *model,
                             const char *class_id,
                             char **out);

// Extracts and validates the knowledge object in a raw model response.
// On a parse failure the status names the failure kind and `*out` is null.
//
// # Safety
// `raw` must be NUL-terminated; free `*out` with [`pl_knowledge_free`].
enum PlStatus pl_knowledge_parse(const char *raw, struct PlKnowledge **out);

// Canonical JSON of a parsed knowledge object.
//
// # Safety
// `k` must be a live handle; free `*out` with [`pl_string_free`].
enum PlStatus pl_knowledge_to_json(const struct PlKnowledge *k, char **out);

// # Safety
// `k` must come from [`pl_knowledge_parse`] and not be freed twice.
void pl_knowledge_free(struct PlKnowledge *k);

struct PlEmbedder *pl_embedder_stub_new(void);

// Cosine distance in [0, 2] between the embeddings of two texts.
//
// # Safety
// `e` must be a live handle; strings NUL-terminated.
enum PlStatus pl_embedder_distance(const struct PlEmbedder *e,
                                   const char *a,
                                   const char *b,
                                   double *out);

// # Safety
// `e` must come from [`pl_embedder_stub_new`] and not be freed twice.
void pl_embedder_free(struct PlEmbedder *e);

// # Safety
// `classes` must point to `n_classes` NUL-terminated class ids; free
// `*out` with [`pl_confusion_free`].
enum PlStatus pl_confusion_new(const char *const *classes,
                               size_t n_classes,
                               struct PlConfusion **out);

// Counts one (true, predicted) observation.
//
// # Safety
// `h` must be a live handle; strings NUL-terminated.
enum PlStatus pl_confusion_add(struct PlConfusion *h,
                               const char *true_class,
                               const char *predicted_class);

// Top-1 accuracy of the observations so far (0 when empty).
//
// # Safety
// `h` must be a live handle.
enum PlStatus pl_confusion_accuracy(const struct PlConfusion *h, double *out);

// # Safety
// `h` must be a live handle; `class_id` NUL-terminated.
enum PlStatus pl_confusion_class_score(const struct PlConfusion *h,
                                       const char *class_id,
                                       struct PlClassScore *out);

// # Safety
// `h` must come from [`pl_confusion_new`] and not be freed twice.
void pl_confusion_free(struct PlConfusion *h);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PLATELINE_H */
