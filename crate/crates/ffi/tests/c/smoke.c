#include <math.h>
#include <stdio.h>
#include "bkd.h"

#define CHECK(call)                                                     \
  do {                                                                  \
    BkdStatus s_ = (call);                                              \
    if (s_ != BKD_STATUS_OK) {                                          \
      fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_,           \
              bkd_last_error());                                        \
      return 1;                                                         \
    }                                                                   \
  } while (0)

int main(void) {
  enum { N = 64, D = 2 };
  double x[N * D];
  uint32_t y[N];
  for (int i = 0; i < N; i++) {
    x[2 * i] = (double)(i % 8) / 7.0;
    x[2 * i + 1] = (double)(i / 8) / 7.0;
    y[i] = x[2 * i] + x[2 * i + 1] > 1.0;
  }
  BkdDataset *ds = NULL;
  CHECK(bkd_dataset_classification(x, N, D, y, 2, &ds));

  size_t tw[] = {2, 16, 2}, sw[] = {2, 3, 2};
  BkdModel *teacher = NULL, *student = NULL;
  CHECK(bkd_mlp_new(tw, 3, BKD_ACTIVATION_TANH, 1, &teacher));
  CHECK(bkd_mlp_new(sw, 3, BKD_ACTIVATION_RELU, 2, &student));

  BkdParams p = bkd_params_default();
  p.train_epochs = 5;
  p.hyper_epochs = 1;
  p.perturb_steps = 2;
  p.batch_size = 16;
  CHECK(bkd_train(BKD_MODE_SCRATCH, teacher, NULL, ds, NULL, &p, NULL, NULL));
  double loss = NAN, acc = NAN;
  CHECK(bkd_train(BKD_MODE_BACKWARD_KD, student, teacher, ds, ds, &p, &loss, &acc));
  if (!(acc >= 0.0 && acc <= 1.0) || !isfinite(loss)) return 2;

  double out[N * D], before[N], after[N];
  CHECK(bkd_generate_auxiliary(student, teacher, x, N, &p, 2.0, out, before, after));
  for (int i = 0; i < N; i++)
    if (after[i] < before[i]) return 3;

  /* Wrong-length output buffer must be rejected with a message. */
  if (bkd_model_forward(student, x, N, out, 1) != BKD_STATUS_DIMENSION) return 4;
  if (bkd_last_error() == NULL) return 5;

  bkd_model_free(student);
  bkd_model_free(teacher);
  bkd_dataset_free(ds);
  printf("ok\n");
  return 0;
}
