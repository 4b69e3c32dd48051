#include <stdio.h>
#include <stdlib.h>
#include "sandwich.h"

#define CHECK(call) do { SwStatus s_ = (call); if (s_ != SW_STATUS_OK) { \
    fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, sw_last_error()); return 1; } } while (0)

int main(int argc, char **argv) {
    if (argc < 2) return 2;
    SwLayout *layout = NULL;
    CHECK(sw_layout_load(argv[1], &layout));
    size_t groups = sw_layout_groups(layout);
    uint8_t mask[16];
    CHECK(sw_layout_mask(layout, mask, sizeof mask));

    SwChunkPlan plan = {3, 2, 4, 4};
    SwEngine *engine = NULL;
    CHECK(sw_engine_new(layout, NULL, 7, &plan, 2, &engine));
    size_t n = sw_engine_chunk_len(engine), d = sw_engine_text_dim(engine);
    double *noise = calloc(n, sizeof(double)), *out = calloc(n, sizeof(double)), *text = calloc(d, sizeof(double));
    for (size_t i = 0; i < n; i++) noise[i] = (double)(i % 7) / 7.0 - 0.5;
    SwCacheBytes first = {0}, bytes = {0};
    for (int c = 0; c < 3; c++) {
        CHECK(sw_engine_step(engine, noise, n, text, d, out, n));
        CHECK(sw_engine_cache_bytes(engine, c == 0 ? &first : &bytes));
    }
    if (bytes.lin_attn != first.lin_attn || bytes.conv_ring != first.conv_ring) return 3;
    if (sw_engine_step(engine, noise, n - 1, text, d, out, n) != SW_STATUS_INVALID_ARGUMENT) return 4;

    SwLatencyInputs li = {4.0, 260.0, 80.0, 4, 12};
    SwLatencyReport lr;
    CHECK(sw_latency_model(&li, &lr));
    printf("groups=%zu mask0=%u chunks=%zu chunk_ms=%.1f fps=%.1f version=%s\n",
           groups, mask[0], sw_engine_chunks_done(engine), lr.chunk_ms, lr.fps, sw_version());
    sw_engine_free(engine);
    sw_layout_free(layout);
    free(noise); free(out); free(text);
    return 0;
}
