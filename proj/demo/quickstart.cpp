// Runs one ATConv layer forward and backward, then prints its kernel statistics
// and the memory model at a typical stage shape.

#include <cmath>
#include <cstdio>

#include "atconv/analysis.hpp"
#include "atconv/atconv.hpp"
#include "atconv/complexity.hpp"

using namespace atconv;

int main() {
    Rng rng(0);
    const std::size_t C = 16, K = 3;
    const auto p = ATConvParams<float>::init(C, K, rng);
    const auto cfg = ATConvConfig<float>::full();
    const auto x = random_tensor<float>({2, C, 14, 14}, rng);

    ATConvCache<float> cache;
    const auto y = atconv_forward(x, p, cfg, &cache);
    std::printf("forward: (%zu, %zu, %zu, %zu) -> (%zu, %zu, %zu, %zu), %zu parameters\n", x.batch(), x.channels(),
                x.height(), x.width(), y.batch(), y.channels(), y.height(), y.width(), param_count(p, cfg));

    // Gradient of sum(y).
    const auto g = atconv_backward(cache, p, cfg, Tensor4<float>(y.shape(), 1.0f));
    double norm = 0.0;
    for (float v : g.input.data()) norm += double(v) * v;
    std::printf("backward: |dL/dx| = %.4f\n", std::sqrt(norm));

    // Modulation pulls each kernel sum toward zero as lambda grows.
    const auto k = atconv_kernel(x, p, cfg);
    double sum = 0.0;
    for (float v : k.alpha.plane(0, 0)) sum += v;
    std::printf("kernel (b=0, c=0) sums to %.4f with lambda %.4f\n", sum, double(sigmoid(p.gamma[0])));

    const ATConvOp<float> op(p, cfg);
    const auto m = influence_map<float>(op, x, {7, 7});
    std::printf("influence mass outside the 3x3 window: %.4f\n", double(mass_outside_window(m.g, {7, 7}, 3)));

    ShapeSpec s;
    s.batch = 32;
    s.channels = 384;
    s.height = s.width = 28;
    s.kernel = K;
    s.elt_bytes = 2;
    const auto mem = memory(s);
    std::printf("activation memory at 32x384x28x28 fp16: attention %.1f MiB, ATConv %.1f MiB (%.1f%% less)\n",
                to_mib(mem.sa_bytes), to_mib(mem.atconv_bytes), 100.0 * mem.reduction);
    return 0;
}
