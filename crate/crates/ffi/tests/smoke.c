#include <stdio.h>
#include <string.h>
#include "cplab.h"

#define CHECK(call)                                                    \
    do {                                                               \
        enum CplabStatus st = (call);                                  \
        if (st != CPLAB_STATUS_OK) {                                   \
            fprintf(stderr, "%s: %d %s\n", #call, st, cplab_last_error()); \
            return 1;                                                  \
        }                                                              \
    } while (0)

int main(void) {
    char text[4096] = "";
    for (int i = 0; i < 40; i++) strcat(text, "the cat sat on the mat. ");
    CplabTokenizer *tok = NULL;
    CHECK(cplab_tokenizer_train(text, 280, 2, 0, &tok));
    size_t len = 0;
    if (cplab_tokenizer_encode(tok, "the cat", NULL, 0, &len) != CPLAB_STATUS_BUFFER_TOO_SMALL) return 2;
    uint32_t ids[64];
    CHECK(cplab_tokenizer_encode(tok, "the cat", ids, 64, &len));
    CplabModel *m = NULL;
    CHECK(cplab_model_init("mini-causal", tok, 0, &m));
    double lp = 0.0;
    CHECK(cplab_model_sequence_logprob(m, ids, len, &lp));
    CplabFisher *f = NULL;
    CHECK(cplab_fisher_estimate(m, tok, text, 2, 0, &f));
    double pen = -1.0;
    CHECK(cplab_ewc_penalty(m, f, 1.0, 0.0, &pen));
    if (cplab_model_init("nope", tok, 0, &m) != CPLAB_STATUS_CONFIG) return 3;
    printf("version=%s vocab=%zu tokens=%zu params=%zu logprob<0=%d penalty=%g\n", cplab_version(),
           cplab_tokenizer_vocab_size(tok), len, cplab_model_param_count(m), lp < 0.0, pen);
    cplab_fisher_free(f);
    cplab_model_free(m);
    cplab_tokenizer_free(tok);
    return 0;
}
