/* SPDX-License-Identifier: Apache-2.0 */
#include <math.h>
#include <stdio.h>

#include "gaplanes.h"

#define CHECK(call)                                              \
  do {                                                           \
    GpStatus s_ = (call);                                        \
    if (s_ != GP_STATUS_OK) {                                    \
      char msg[256];                                             \
      gp_last_error(msg, sizeof msg);                            \
      fprintf(stderr, "%s failed (%d): %s\n", #call, s_, msg);  \
      return 1;                                                  \
    }                                                            \
  } while (0)

int main(void) {
  GpModel *m = NULL;
  CHECK(gp_model_plane("mul(e1,e2)", 3, 16, 2, GP_INTERP_NEAREST, GP_DECODER_LINEAR, 8, false, 7, &m));
  double mat[16 * 16];
  CHECK(gp_model_assemble(m, 16, 16, mat));
  size_t rank = 0;
  CHECK(gp_numeric_rank(mat, 16, 16, 1e-9, &rank));
  if (rank != 3) {
    fprintf(stderr, "rank %zu\n", rank);
    return 1;
  }
  GpModel *bad = NULL;
  if (gp_model_plane("mul(e1,", 3, 16, 2, GP_INTERP_NEAREST, GP_DECODER_LINEAR, 8, false, 7, &bad) != GP_STATUS_INVALID_ARGUMENT) return 1;
  gp_model_free(m);
  printf("ok rank=%zu\n", rank);
  return 0;
}
