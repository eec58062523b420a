#ifndef LATTE_H
#define LATTE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LatteAggregation {
  LATTE_AGGREGATION_SUM = 0,
  LATTE_AGGREGATION_MAX = 1,
} LatteAggregation;

typedef enum LatteStatus {
  LATTE_STATUS_OK = 0,
  LATTE_STATUS_NULL_POINTER = 1,
  LATTE_STATUS_INVALID_ARGUMENT = 2,
  LATTE_STATUS_IO = 3,
  LATTE_STATUS_PARSE = 4,
  LATTE_STATUS_MODEL = 5,
  LATTE_STATUS_BUFFER_TOO_SMALL = 6,
  LATTE_STATUS_PANIC = 7,
} LatteStatus;

// A tokenized catalog.
typedef struct LatteCatalog LatteCatalog;

// One decoding trie, or one per permutation when bound.
typedef struct LatteForest LatteForest;

// Trained scorer parameters.
typedef struct LatteModel LatteModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Version string of the library, NUL-terminated and static.
const char *latte_version(void);

// Length in bytes of the last error message on this thread, excluding the NUL.
size_t latte_last_error_length(void);

// Copies the last error message into `buf` (NUL-terminated, truncated to
// `cap - 1` bytes). Returns the full message length.
//
// # Safety
// `buf` must be null or point to `cap` writable bytes.
size_t latte_last_error_message(char *buf, size_t cap);

// Loads a catalog JSON file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum LatteStatus latte_catalog_load(const char *path, struct LatteCatalog **out);

// # Safety
// `catalog` must come from [`latte_catalog_load`] and not be used afterwards.
void latte_catalog_free(struct LatteCatalog *catalog);

// Number of items, or 0 for a null handle.
//
// # Safety
// `catalog` must be null or a live handle.
size_t latte_catalog_len(const struct LatteCatalog *catalog);

// SID length `m`, or 0 for a null handle.
//
// # Safety
// `catalog` must be null or a live handle.
size_t latte_catalog_depth(const struct LatteCatalog *catalog);

// Index of the item named `item_id`.
//
// # Safety
// `catalog` must be a live handle, `item_id` a NUL-terminated string and
// `index` writable.
enum LatteStatus latte_catalog_index_of(const struct LatteCatalog *catalog,
                                        const char *item_id,
                                        size_t *index);

// Writes the `m` codes of item `index` into `codes`.
//
// # Safety
// `catalog` must be a live handle and `codes` point to `cap` writable values.
enum LatteStatus latte_catalog_sid(const struct LatteCatalog *catalog,
                                   size_t index,
                                   uint32_t *codes,
                                   size_t cap);

// Builds the decoding forest: a single trie when `bind` is 0, otherwise one
// trie per permutation of the SID positions (`latent` must equal `m!`).
//
// # Safety
// `catalog` must be a live handle and `out` writable.
enum LatteStatus latte_forest_new(const struct LatteCatalog *catalog,
                                  size_t latent,
                                  bool bind,
                                  struct LatteForest **out);

// # Safety
// `forest` must come from [`latte_forest_new`] and not be used afterwards.
void latte_forest_free(struct LatteForest *forest);

// Number of tries in the forest, or 0 for a null handle.
//
// # Safety
// `forest` must be null or a live handle.
size_t latte_forest_len(const struct LatteForest *forest);

// Tree distance `2(m − common prefix)` between items `a` and `b` in the trie
// decoded after latent token `latent`. A negative `latent`, or any valid one
// on an unbound forest, selects the shared trie.
//
// # Safety
// `forest` must be a live handle and `distance` writable.
enum LatteStatus latte_tree_distance(const struct LatteForest *forest,
                                     int64_t latent,
                                     size_t a,
                                     size_t b,
                                     size_t *distance);

// Loads scorer parameters from JSON.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum LatteStatus latte_model_load(const char *path, struct LatteModel **out);

// # Safety
// `model` must come from [`latte_model_load`] and not be used afterwards.
void latte_model_free(struct LatteModel *model);

// Latent vocabulary size of the model (0 for the base model or a null handle).
//
// # Safety
// `model` must be null or a live handle.
size_t latte_model_latent(const struct LatteModel *model);

// Exhaustive log-scores of every item given a chronological history of item
// indices. `scores` receives one value per catalog item.
//
// # Safety
// Handles must be live; `history` must point to `history_len` values and
// `scores` to `cap` writable values.
enum LatteStatus latte_score_items(const struct LatteModel *model,
                                   const struct LatteForest *forest,
                                   const struct LatteCatalog *catalog,
                                   const size_t *history,
                                   size_t history_len,
                                   enum LatteAggregation agg,
                                   double *scores,
                                   size_t cap);

// Beam search. Writes up to `cap` item indices and log-scores in rank order
// and the number written to `written`.
//
// # Safety
// Handles must be live; `history` must point to `history_len` values;
// `items` and `scores` must each point to `cap` writable values.
enum LatteStatus latte_beam_search(const struct LatteModel *model,
                                   const struct LatteForest *forest,
                                   const struct LatteCatalog *catalog,
                                   const size_t *history,
                                   size_t history_len,
                                   size_t beam_size,
                                   enum LatteAggregation agg,
                                   size_t *items,
                                   double *scores,
                                   size_t cap,
                                   size_t *written);

// Cantelli bound on the rank-reversal rate of two items with mean gap `mu`,
// pooled variance `sigma2` and correlation `rho`.
//
// # Safety
// `bound` must be writable.
enum LatteStatus latte_cantelli_bound(double mu, double sigma2, double rho, double *bound);

// Correlation under a uniform mixture of `latent` tries where only one keeps
// the pair at `rho` and the rest give `rho_low`.
//
// # Safety
// `value` must be writable.
enum LatteStatus latte_effective_correlation(double rho,
                                             double rho_low,
                                             size_t latent,
                                             double *value);

// Pearson correlation of two equal-length samples.
//
// # Safety
// `x` and `y` must point to `n` values; `r` must be writable.
enum LatteStatus latte_pearson(const double *x, const double *y, size_t n, double *r);

// Kendall tau-b of two equal-length samples.
//
// # Safety
// `x` and `y` must point to `n` values; `tau` must be writable.
enum LatteStatus latte_kendall_tau_b(const double *x, const double *y, size_t n, double *tau);

// NDCG@k of a single relevant item found at 1-based `rank` (0 = not ranked).
double latte_ndcg_at_rank(size_t rank, size_t k);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATTE_H */
