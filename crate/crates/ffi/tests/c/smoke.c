#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "timefuse.h"

#define CHECK(call)                                                              \
    do {                                                                         \
        enum TfStatus s_ = (call);                                               \
        if (s_ != TF_STATUS_OK) {                                                \
            fprintf(stderr, "%s -> %d: %s\n", #call, s_, tf_last_error_message()); \
            return 1;                                                            \
        }                                                                        \
    } while (0)

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke <checkpoint-root>\n");
        return 2;
    }
    printf("version %s\n", tf_version());

    struct TfConfig *cfg = NULL;
    CHECK(tf_config_new("desk", &cfg));
    CHECK(tf_config_set(cfg, "generator.n_sessions=10"));
    if (tf_config_set(cfg, "generator.bogus=1") != TF_STATUS_INVALID_CONFIG) return 1;
    if (strlen(tf_last_error_message()) == 0) return 1;

    struct TfCorpus *corpus = NULL;
    CHECK(tf_corpus_generate(cfg, 0, &corpus));
    size_t windows = tf_corpus_num_windows(corpus);
    if (windows == 0 || tf_corpus_num_modalities(corpus) != 4) return 1;

    struct TfModel *model = NULL;
    CHECK(tf_model_load(argv[1], "stage2-time-aware", &model));
    if (!tf_model_is_time_aware(model)) return 1;
    size_t width = tf_model_embedding_width(model);

    size_t rows = 0;
    if (tf_model_embed(model, corpus, 1, 2, NULL, 0, &rows) != TF_STATUS_BUFFER_TOO_SMALL) return 1;
    if (rows != windows) return 1;
    float *buf = malloc(rows * width * sizeof(float));
    CHECK(tf_model_embed(model, corpus, 1, 2, buf, rows * width, &rows));
    double energy = 0.0;
    for (size_t i = 0; i < rows * width; i++) energy += (double)buf[i] * buf[i];
    free(buf);
    if (!(energy > 0.0)) return 1;

    double scores[4] = {0.1, 0.4, 0.35, 0.8};
    unsigned char labels[4] = {0, 0, 1, 1};
    double auc = 0.0;
    CHECK(tf_auroc(scores, labels, 4, &auc));
    if (auc != 0.75) return 1;

    tf_model_free(model);
    tf_corpus_free(corpus);
    tf_config_free(cfg);
    printf("rows %zu width %zu ok\n", rows, width);
    return 0;
}
