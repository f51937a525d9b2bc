#ifndef BONMF_H
#define BONMF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BonmfStatus {
  BONMF_STATUS_OK = 0,
  BONMF_STATUS_NULL_POINTER = 1,
  BONMF_STATUS_INVALID_ARGUMENT = 2,
  BONMF_STATUS_IO = 3,
  BONMF_STATUS_FORMAT = 4,
  BONMF_STATUS_MISSING_FEATURE = 5,
  BONMF_STATUS_NUMERIC = 6,
  BONMF_STATUS_PANIC = 7,
} BonmfStatus;

/**
 * Which feature store a file fills.
 */
typedef enum BonmfModality {
  BONMF_MODALITY_USER_PROFILE = 0,
  BONMF_MODALITY_ITEM_TEXT = 1,
  BONMF_MODALITY_ITEM_IMAGE = 2,
} BonmfModality;

/**
 * Up to one feature store per modality.
 */
typedef struct BonmfFeatures BonmfFeatures;

/**
 * A trained BoNMF or SVD checkpoint.
 */
typedef struct BonmfPredictor BonmfPredictor;

/**
 * Parsed ratings file.
 */
typedef struct BonmfRatings BonmfRatings;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *bonmf_last_error(void);

/**
 * Static, NUL-terminated library version.
 */
const char *bonmf_version(void);

/**
 * Loads a ratings file. `format` is "csv", "movielens_dat" or NULL to
 * infer from the extension.
 *
 * # Safety
 * `path` and a non-NULL `format` must be NUL-terminated strings; `out` must
 * be valid for a pointer write.
 */
enum BonmfStatus bonmf_ratings_load(const char *path,
                                    const char *format,
                                    struct BonmfRatings **out);

/**
 * Number of rating records; 0 for NULL.
 *
 * # Safety
 * `ratings` must be NULL or a live handle.
 */
size_t bonmf_ratings_len(const struct BonmfRatings *ratings);

/**
 * # Safety
 * `ratings` must be NULL or a handle not yet freed.
 */
void bonmf_ratings_free(struct BonmfRatings *ratings);

/**
 * Creates an empty feature set.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum BonmfStatus bonmf_features_new(struct BonmfFeatures **out);

/**
 * Parses a feature file (text or binary) into the slot for `modality`,
 * replacing any previous store there. `modality` takes [`BonmfModality`]
 * values.
 *
 * # Safety
 * `features` must be a live handle not used concurrently; `path` must be a
 * NUL-terminated string.
 */
enum BonmfStatus bonmf_features_load(struct BonmfFeatures *features,
                                     uint32_t modality,
                                     const char *path);

/**
 * # Safety
 * `features` must be NULL or a handle not yet freed.
 */
void bonmf_features_free(struct BonmfFeatures *features);

/**
 * Loads a model checkpoint written by `bonmf train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a pointer
 * write.
 */
enum BonmfStatus bonmf_model_load(const char *path, struct BonmfPredictor **out);

/**
 * Predicted rating, clipped to the rating range. Unknown ids fall back to
 * the cold-start path; content features must still be present for every
 * modality the model uses.
 *
 * # Safety
 * `model` and `features` must be live handles; the ids must be
 * NUL-terminated strings; `out` must be valid for a write.
 */
enum BonmfStatus bonmf_model_predict(const struct BonmfPredictor *model,
                                     const struct BonmfFeatures *features,
                                     const char *user_id,
                                     const char *item_id,
                                     double *out);

/**
 * Mean squared error of the model over every record in `ratings`.
 *
 * # Safety
 * All handles must be live; `out` must be valid for a write.
 */
enum BonmfStatus bonmf_model_mse(const struct BonmfPredictor *model,
                                 const struct BonmfRatings *ratings,
                                 const struct BonmfFeatures *features,
                                 double *out);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void bonmf_model_free(struct BonmfPredictor *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BONMF_H */
