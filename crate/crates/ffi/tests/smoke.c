#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "onlinenorm.h"

#define CHECK(expr)                                                            \
    do {                                                                       \
        if (!(expr)) {                                                         \
            const char *e = onrm_last_error();                                 \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #expr,     \
                    e ? e : "no error");                                       \
            return 1;                                                          \
        }                                                                      \
    } while (0)

int main(void) {
    OnrmConfig cfg = onrm_default_config();
    cfg.layer_scaling = false;
    cfg.affine = false;
    OnrmNorm *h = NULL;
    CHECK(onrm_new(1, &cfg, &h) == ONRM_STATUS_OK);

    /* First sample after construction: mu = 0, sigma = 1, so y = x. */
    double x = 3.0, y = 0.0, g = 1.0, dx = 0.0;
    CHECK(onrm_forward(h, &x, 1, 1, &y) == ONRM_STATUS_OK);
    CHECK(y == 3.0);
    CHECK(onrm_backward(h, &g, 1, 1, &dx) == ONRM_STATUS_OK);
    CHECK(dx == 1.0);
    CHECK(onrm_backward(h, &g, 1, 1, &dx) == ONRM_STATUS_HANDSHAKE);

    double mean = 0.0, var = 0.0;
    CHECK(onrm_get_stats(h, &mean, &var, 1) == ONRM_STATUS_OK);
    CHECK(fabs(mean - (1.0 - cfg.alpha_f) * 3.0) < 1e-15);

    size_t need = 0;
    CHECK(onrm_serialize(h, NULL, 0, &need) == ONRM_STATUS_BUFFER_TOO_SMALL);
    unsigned char *buf = malloc(need);
    CHECK(onrm_serialize(h, buf, need, &need) == ONRM_STATUS_OK);
    CHECK(onrm_reset(h) == ONRM_STATUS_OK);
    CHECK(onrm_load_state(h, buf, need) == ONRM_STATUS_OK);
    free(buf);

    onrm_free(h);
    printf("ok\n");
    return 0;
}
