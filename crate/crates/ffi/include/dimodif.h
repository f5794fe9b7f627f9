#ifndef DIMODIF_H
#define DIMODIF_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DmdStatus {
  DMD_STATUS_OK = 0,
  DMD_STATUS_NULL_POINTER = 1,
  DMD_STATUS_INVALID_ARGUMENT = 2,
  DMD_STATUS_IO = 3,
  DMD_STATUS_FORMAT = 4,
  DMD_STATUS_TASK_MISMATCH = 5,
  DMD_STATUS_NOT_APPLICABLE = 6,
  DMD_STATUS_NON_FINITE = 7,
  DMD_STATUS_OUT_OF_RANGE = 8,
  DMD_STATUS_PANIC = 9,
} DmdStatus;

typedef enum DmdTask {
  DMD_TASK_DFD = 0,
  DMD_TASK_TFL = 1,
} DmdTask;

typedef enum DmdModality {
  DMD_MODALITY_VISUAL = 0,
  DMD_MODALITY_AUDIO = 1,
} DmdModality;

/**
 * A loaded checkpoint.
 */
typedef struct DmdModel DmdModel;

/**
 * Proposals from one localization call, highest confidence first.
 */
typedef struct DmdProposalList DmdProposalList;

typedef struct DmdModelInfo {
  int32_t task;
  size_t d;
  size_t heads;
  size_t layers;
  size_t window;
  size_t f_max;
  size_t d0;
} DmdModelInfo;

typedef struct DmdProposal {
  /**
   * 0 visual, 1 audio.
   */
  int32_t modality;
  double onset;
  double offset;
  double confidence;
} DmdProposal;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread; empty after success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *dmd_last_error(void);

/**
 * Static name of a status code.
 */
const char *dmd_status_name(enum DmdStatus status);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DmdStatus dmd_model_load(const char *path, struct DmdModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`dmd_model_load`] and not be used afterwards.
 */
void dmd_model_free(struct DmdModel *model);

/**
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum DmdStatus dmd_model_info(const struct DmdModel *model, struct DmdModelInfo *out);

/**
 * Per-modality fake probabilities from a detection model. Features are
 * row-major `frames × d0` float arrays.
 *
 * # Safety
 * `visual` and `audio` must each hold `frames * d0` floats; `out_probs`
 * must hold 2 floats (visual, audio).
 */
enum DmdStatus dmd_model_predict_dfd(const struct DmdModel *model,
                                     const float *visual,
                                     const float *audio,
                                     size_t frames,
                                     size_t d0,
                                     double *out_probs);

/**
 * Level-averaged frame outputs of a localization model. Each output array
 * holds `2 * frames` values: visual frames then audio frames.
 *
 * # Safety
 * Input buffers as for [`dmd_model_predict_dfd`]; each output must hold
 * `2 * frames` doubles.
 */
enum DmdStatus dmd_model_frame_outputs(const struct DmdModel *model,
                                       const float *visual,
                                       const float *audio,
                                       size_t frames,
                                       size_t d0,
                                       double *out_prob,
                                       double *out_d_start,
                                       double *out_d_end);

/**
 * Decoded, suppressed fake-segment proposals from a localization model.
 *
 * # Safety
 * Input buffers as for [`dmd_model_predict_dfd`]; `out` must be valid.
 */
enum DmdStatus dmd_model_predict_tfl(const struct DmdModel *model,
                                     const float *visual,
                                     const float *audio,
                                     size_t frames,
                                     size_t d0,
                                     struct DmdProposalList **out);

/**
 * Number of proposals; 0 for null.
 *
 * # Safety
 * `list` must be null or come from [`dmd_model_predict_tfl`].
 */
size_t dmd_proposals_len(const struct DmdProposalList *list);

/**
 * # Safety
 * `list` must come from [`dmd_model_predict_tfl`]; `out` must be valid.
 */
enum DmdStatus dmd_proposals_get(const struct DmdProposalList *list,
                                 size_t index,
                                 struct DmdProposal *out);

/**
 * # Safety
 * `list` must be null or come from [`dmd_model_predict_tfl`], and not be
 * used afterwards.
 */
void dmd_proposals_free(struct DmdProposalList *list);

/**
 * Intersection over union of `[onset_a, offset_a)` and `[onset_b, offset_b)`.
 *
 * # Safety
 * `out` must be valid.
 */
enum DmdStatus dmd_iou(double onset_a,
                       double offset_a,
                       double onset_b,
                       double offset_b,
                       double *out);

/**
 * Normalized insert/delete edit distance between two UTF-8 transcripts,
 * over characters (`words == 0`) or whitespace-separated words.
 *
 * # Safety
 * `a` and `b` must be NUL-terminated strings; `out` must be valid.
 */
enum DmdStatus dmd_normalized_divergence(const char *a, const char *b, int32_t words, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIMODIF_H */
