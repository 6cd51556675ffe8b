#pragma once

// Finite-difference sweeps over a whole ATConv operator (test-only).

#include <algorithm>
#include <string>
#include <vector>

#include "atconv/atconv.hpp"
#include "test_support.hpp"

namespace atconv::test {

struct GradReport {
    double worst = 0.0;
    std::string worst_name;

    void add(const std::string& name, double err) {
        if (err >= worst) {
            worst = err;
            worst_name = name;
        }
    }
};

/// Every parameter tensor, the static kernel (when present) and the input are
/// perturbed in turn and compared with atconv_backward.
inline GradReport check_atconv_gradients(Tensor4<double> x, ATConvParams<double> p, ATConvConfig<double> cfg,
                                         std::uint64_t seed, double h = 1e-3) {
    const auto r = random_weights(x.size(), seed);
    auto loss = [&] { return weighted_sum(atconv_forward(x, p, cfg).data(), r); };

    ATConvCache<double> cache;
    atconv_forward(x, p, cfg, &cache);
    auto g = atconv_backward(cache, p, cfg, Tensor4<double>(x.shape(), r));

    GradReport report;
    report.add("input", rel_error(g.input.data(), fd_gradient(x.data(), loss, h)));
    auto pv = p.views();
    auto gv = g.views();
    for (std::size_t i = 0; i < pv.size(); ++i) {
        report.add(pv[i].first, rel_error(gv[i].second, fd_gradient(pv[i].second, loss, h)));
    }
    if (cfg.static_kernel) {
        report.add("static_kernel", rel_error(g.static_kernel.data(), fd_gradient(cfg.static_kernel->data(), loss, h)));
    }
    return report;
}

} // namespace atconv::test
