#ifndef BKD_H
#define BKD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BkdActivation {
  BKD_ACTIVATION_RELU = 0,
  BKD_ACTIVATION_TANH = 1,
} BkdActivation;

typedef enum BkdMode {
  BKD_MODE_SCRATCH = 0,
  BKD_MODE_VANILLA_KD = 1,
  BKD_MODE_BACKWARD_KD = 2,
} BkdMode;

typedef enum BkdModelKind {
  BKD_MODEL_KIND_MLP = 0,
  BKD_MODEL_KIND_POLYNOMIAL = 1,
  BKD_MODEL_KIND_EMBEDDING = 2,
} BkdModelKind;

// Result of every fallible call.
typedef enum BkdStatus {
  BKD_STATUS_OK = 0,
  BKD_STATUS_NULL_ARGUMENT = 1,
  BKD_STATUS_INVALID_ARGUMENT = 2,
  BKD_STATUS_DIMENSION = 3,
  BKD_STATUS_FORMAT = 4,
  BKD_STATUS_IO = 5,
  BKD_STATUS_NUMERIC = 6,
  BKD_STATUS_EMPTY_DATASET = 7,
  BKD_STATUS_PANIC = 8,
} BkdStatus;

// Opaque dataset handle.
typedef struct BkdDataset BkdDataset;

// Opaque model handle.
typedef struct BkdModel BkdModel;

// Training hyperparameters. Start from `bkd_params_default()`.
//
// `clip_lo > clip_hi` disables input clipping.
typedef struct BkdParams {
  double lambda;
  double temperature;
  double learning_rate;
  double momentum;
  double perturb_rate;
  double clip_lo;
  double clip_hi;
  uint32_t train_epochs;
  uint32_t hyper_epochs;
  uint32_t perturb_steps;
  uint32_t batch_size;
  uint64_t seed;
  // Nonzero keeps auxiliary samples from every round.
  uint8_t accumulate_aux;
  // Nonzero measures the gap on probabilities instead of logits.
  uint8_t probability_space;
} BkdParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *bkd_last_error(void);

struct BkdParams bkd_params_default(void);

// Creates an MLP with layer widths `widths[0..n_widths]` (input first).
//
// # Safety
// `widths` must point to `n_widths` values and `out` to writable storage.
enum BkdStatus bkd_mlp_new(const uintptr_t *widths,
                           uintptr_t n_widths,
                           enum BkdActivation activation,
                           uint64_t seed,
                           struct BkdModel **out);

// Creates a polynomial regressor with explicit coefficients (constant term first).
//
// # Safety
// `coefficients` must point to `n` values and `out` to writable storage.
enum BkdStatus bkd_polynomial_new(const double *coefficients,
                                  uintptr_t n,
                                  double scale,
                                  struct BkdModel **out);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum BkdStatus bkd_model_load(const char *path_, struct BkdModel **out);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum BkdStatus bkd_model_save(const struct BkdModel *model, const char *path_);

// Duplicates a model.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum BkdStatus bkd_model_clone(const struct BkdModel *model, struct BkdModel **out);

// # Safety
// `model` must be NULL or a handle not yet freed.
void bkd_model_free(struct BkdModel *model);

// Writes the model kind, input width, output width and parameter count.
// Any output pointer may be NULL.
//
// # Safety
// `model` must be a live handle.
enum BkdStatus bkd_model_info(const struct BkdModel *model,
                              enum BkdModelKind *kind,
                              uintptr_t *in_dim,
                              uintptr_t *out_dim,
                              uintptr_t *param_count);

// Forward pass on `rows` row-major inputs of the model's input width. Writes
// `rows * out_dim` outputs.
//
// # Safety
// `x` must hold `rows * in_dim` values and `y` room for `rows * out_dim`.
enum BkdStatus bkd_model_forward(const struct BkdModel *model,
                                 const double *x,
                                 uintptr_t rows,
                                 double *y,
                                 uintptr_t y_len);

// Builds a classification dataset from `rows` row-major feature vectors.
//
// # Safety
// `x` must hold `rows * cols` values and `labels` `rows` values.
enum BkdStatus bkd_dataset_classification(const double *x,
                                          uintptr_t rows,
                                          uintptr_t cols,
                                          const uint32_t *labels,
                                          uintptr_t classes,
                                          struct BkdDataset **out);

// Builds a regression dataset with `out_cols` targets per row.
//
// # Safety
// `x` must hold `rows * cols` values and `y` `rows * out_cols` values.
enum BkdStatus bkd_dataset_regression(const double *x,
                                      uintptr_t rows,
                                      uintptr_t cols,
                                      const double *y,
                                      uintptr_t out_cols,
                                      struct BkdDataset **out);

// Loads a dataset written by `bkd gen-aux` or `bkd_dataset_save`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum BkdStatus bkd_dataset_load(const char *path_, struct BkdDataset **out);

// # Safety
// `ds` must be a live handle and `path` a NUL-terminated string.
enum BkdStatus bkd_dataset_save(const struct BkdDataset *ds, const char *path_);

// Number of rows, or 0 for a NULL handle.
//
// # Safety
// `ds` must be NULL or a live handle.
uintptr_t bkd_dataset_len(const struct BkdDataset *ds);

// # Safety
// `ds` must be NULL or a handle not yet freed.
void bkd_dataset_free(struct BkdDataset *ds);

// Trains `student` in place. `teacher` may be NULL for `Scratch`; `eval` may
// be NULL. Writes the final evaluation loss and accuracy (NaN for regression)
// when the pointers are non-NULL and an eval set is given.
//
// # Safety
// All non-NULL handles must be live; `student` must not alias `teacher`.
enum BkdStatus bkd_train(enum BkdMode mode,
                         struct BkdModel *student,
                         const struct BkdModel *teacher,
                         const struct BkdDataset *train,
                         const struct BkdDataset *eval,
                         const struct BkdParams *params,
                         double *eval_loss,
                         double *eval_accuracy);

// Evaluates `model` on `ds`. Accuracy is NaN for regression data.
//
// # Safety
// Handles must be live and output pointers writable.
enum BkdStatus bkd_evaluate(const struct BkdModel *model,
                            const struct BkdDataset *ds,
                            double *loss,
                            double *accuracy);

// Moves each input row uphill on the student/teacher output gap and writes
// the perturbed rows to `x_out` and the per-row gap before and after.
// `temperature <= 0` treats the models as regressors.
//
// # Safety
// `x` and `x_out` must hold `rows * in_dim` values; `before` and `after`
// must each hold `rows` values or be NULL.
enum BkdStatus bkd_generate_auxiliary(const struct BkdModel *student_,
                                      const struct BkdModel *teacher,
                                      const double *x,
                                      uintptr_t rows,
                                      const struct BkdParams *params,
                                      double temperature,
                                      double *x_out,
                                      double *before,
                                      double *after);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BKD_H */
