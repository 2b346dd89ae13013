/* Minimal C consumer: load a checkpoint, inspect it, run one inference,
 * trim it losslessly, and confirm the cost dropped. Exits 0 on success. */

#include <stdio.h>

#include "csgd.h"

static const char *CONFIG =
    "[model]\n"
    "arch = \"toy_vgg\"\n"
    "input = [1, 1, 2]\n"
    "classes = 3\n"
    "stages = [[4]]\n"
    "\n"
    "[dataset]\n"
    "kind = \"blobs\"\n"
    "\n"
    "[csgd]\n"
    "ratio = \"1/2\"\n";

static int require(CsgdStatus status, const char *what) {
  if (status != CSGD_STATUS_OK) {
    fprintf(stderr, "%s failed (%d): %s\n", what, (int)status,
            csgd_last_error_message());
    return 1;
  }
  return 0;
}

int main(int argc, char **argv) {
  if (argc != 2) {
    fprintf(stderr, "usage: smoke <checkpoint>\n");
    return 2;
  }

  CsgdModel *model = NULL;
  if (require(csgd_model_load(argv[1], &model), "load")) return 1;

  CsgdModelInfo info;
  if (require(csgd_model_info(model, &info), "info")) return 1;
  if (info.input_h != 1 || info.input_w != 1 || info.input_c != 2 ||
      info.classes != 3) {
    fprintf(stderr, "unexpected model shape\n");
    return 1;
  }

  float pixels[2] = {0.25f, -0.5f};
  float logits[3] = {0};
  if (require(csgd_model_predict(model, pixels, 2, logits, 3), "predict"))
    return 1;

  CsgdModel *trimmed = NULL;
  float diff = -1.0f;
  if (require(csgd_model_trim(model, CONFIG, 1, &trimmed, &diff), "trim"))
    return 1;

  CsgdModelInfo slim;
  if (require(csgd_model_info(trimmed, &slim), "trimmed info")) return 1;
  if (slim.flops >= info.flops || slim.params >= info.params) {
    fprintf(stderr, "trim did not reduce cost\n");
    return 1;
  }

  float same = -1.0f;
  if (require(csgd_verify_equivalence(model, model, 16, 0, &same), "verify"))
    return 1;
  if (same != 0.0f) {
    fprintf(stderr, "model differs from itself by %g\n", (double)same);
    return 1;
  }

  printf("smoke ok: flops %llu -> %llu, trim diff %g\n",
         (unsigned long long)info.flops, (unsigned long long)slim.flops,
         (double)diff);
  csgd_model_free(trimmed);
  csgd_model_free(model);
  return 0;
}
