#ifndef DEMOSEL_H
#define DEMOSEL_H

/* Generated by cbindgen. Do not edit. */

#include <stdbool.h>
#include <stddef.h>

typedef enum DemoselStatus {
  DEMOSEL_STATUS_OK = 0,
  DEMOSEL_STATUS_NULL_POINTER = 1,
  DEMOSEL_STATUS_INVALID_UTF8 = 2,
  DEMOSEL_STATUS_INVALID_INPUT = 3,
  DEMOSEL_STATUS_IO = 4,
  DEMOSEL_STATUS_ARTIFACT = 5,
  DEMOSEL_STATUS_CONFIG = 6,
  DEMOSEL_STATUS_BACKEND = 7,
  DEMOSEL_STATUS_PANIC = 8,
} DemoselStatus;

/**
 * A BM25 index over a pool's inputs.
 */
typedef struct DemoselBm25 DemoselBm25;

/**
 * A validated candidate pool.
 */
typedef struct DemoselPool DemoselPool;

/**
 * A trained retriever bound to its vector index.
 */
typedef struct DemoselRetriever DemoselRetriever;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Owned by the
 * library and valid until the next call on the same thread.
 */
const char *demosel_last_error(void);

/**
 * Library version as a static string.
 */
const char *demosel_version(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void demosel_string_free(char *s);

/**
 * Load and validate a JSONL pool file. Rejected samples are skipped.
 *
 * # Safety
 * `path` must be a valid C string and `out` a writable pointer.
 */
enum DemoselStatus demosel_pool_load(const char *path, bool strict, struct DemoselPool **out);

/**
 * Number of samples in `pool`, 0 for null.
 *
 * # Safety
 * `pool` must be null or a live handle.
 */
size_t demosel_pool_len(const struct DemoselPool *pool);

/**
 * # Safety
 * `pool` must be null or a handle from [`demosel_pool_load`] not yet freed.
 */
void demosel_pool_free(struct DemoselPool *pool);

/**
 * Index the inputs of `pool` with BM25 (k1 = 1.2, b = 0.75).
 *
 * # Safety
 * `pool` must be a live handle and `out` a writable pointer.
 */
enum DemoselStatus demosel_bm25_build(const struct DemoselPool *pool, struct DemoselBm25 **out);

/**
 * Top `k` documents for `query` as a JSON array of `{"id", "score"}`.
 *
 * # Safety
 * `index` must be a live handle, `query` a C string, `out_json` writable.
 */
enum DemoselStatus demosel_bm25_top_k(const struct DemoselBm25 *index,
                                      const char *query,
                                      size_t k,
                                      char **out_json);

/**
 * # Safety
 * `index` must be null or a handle from [`demosel_bm25_build`] not yet freed.
 */
void demosel_bm25_free(struct DemoselBm25 *index);

/**
 * Open a retriever checkpoint directory together with its index file.
 * Fails with `Artifact` when the index was built by another checkpoint.
 *
 * # Safety
 * Both paths must be C strings and `out` a writable pointer.
 */
enum DemoselStatus demosel_retriever_open(const char *checkpoint_dir,
                                          const char *index_path,
                                          struct DemoselRetriever **out);

/**
 * Top `k` demonstrations for one sample (a pool-format JSON record) as
 * `{"hits": [{"id", "score"}], "warning": string|null}`.
 *
 * # Safety
 * `retriever` must be a live handle, `sample_json` a C string and
 * `out_json` writable.
 */
enum DemoselStatus demosel_retriever_retrieve(const struct DemoselRetriever *retriever,
                                              const char *sample_json,
                                              size_t k,
                                              char **out_json);

/**
 * # Safety
 * `retriever` must be null or a handle from [`demosel_retriever_open`]
 * not yet freed.
 */
void demosel_retriever_free(struct DemoselRetriever *retriever);

/**
 * Prompt rendering of a sample, with or without its output section.
 *
 * # Safety
 * `sample_json` must be a C string and `out` writable.
 */
enum DemoselStatus demosel_linearize(const char *sample_json, bool include_output, char **out);

/**
 * Parse generated text for a task (`NER`, `RE`, `ED` or `EAE`) and a JSON
 * array schema into `{"extractions": [...], "segments", "skipped",
 * "ambiguous_commas"}`.
 *
 * # Safety
 * All pointers must be C strings except `out_json`, which must be writable.
 */
enum DemoselStatus demosel_parse_output(const char *generated,
                                        const char *task,
                                        const char *schema_json,
                                        char **out_json);

/**
 * Micro-F1 report for a JSON array of predictions against a JSON array of
 * gold samples. `normalize` is `exact` or `lower`.
 *
 * # Safety
 * All pointers must be C strings except `out_json`, which must be writable.
 */
enum DemoselStatus demosel_evaluate(const char *predictions_json,
                                    const char *golds_json,
                                    const char *normalize,
                                    char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEMOSEL_H */
