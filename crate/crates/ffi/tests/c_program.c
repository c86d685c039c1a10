#include <stdio.h>
#include <string.h>

#include "mltr.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        return 2;
    }
    uint64_t counts[4] = {3, 0, 0, 3};
    MltrMetrics m;
    if (mltr_metrics(counts, 2, &m) != MLTR_STATUS_OK || m.qw_kappa != 1.0) {
        return 3;
    }
    MltrModel *model = NULL;
    if (mltr_model_load(NULL, &model) != MLTR_STATUS_NULL_POINTER || strlen(mltr_last_error()) == 0) {
        return 4;
    }
    if (mltr_model_load(argv[1], &model) != MLTR_STATUS_OK) {
        fprintf(stderr, "%s\n", mltr_last_error());
        return 5;
    }
    size_t c, h, w, k;
    mltr_model_info(model, &c, &h, &w, &k);
    float pixels[4096];
    float logits[16];
    for (size_t i = 0; i < c * h * w; i++) {
        pixels[i] = (float)(i % 9) / 9.0f;
    }
    if (mltr_model_predict(model, pixels, c * h * w, logits, 16) != MLTR_STATUS_OK) {
        fprintf(stderr, "%s\n", mltr_last_error());
        return 6;
    }
    printf("%s", mltr_version());
    for (size_t i = 0; i < k; i++) {
        printf(" %.9g", logits[i]);
    }
    printf("\n");
    mltr_model_free(model);
    return 0;
}
