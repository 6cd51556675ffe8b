#pragma once

// Walks the DWConv -> ATConv roadmap: parameter count, forward latency and a
// gradient check per stage, plus a short training probe on the softmax stage.

#include <chrono>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "atconv/bench.hpp"
#include "atconv/gradcheck.hpp"
#include "atconv/micro.hpp"

namespace atconv {

struct AblateSpec {
    std::size_t batch = 2;
    std::size_t channels = 16;
    std::size_t resolution = 16;
    std::size_t kernel = 3;
    std::size_t reps = 5;
    std::size_t probe_steps = 100;
    std::uint64_t seed = 0;

    void validate() const {
        if (batch == 0 || channels == 0 || resolution == 0) throw ArgumentError("ablate: sizes must be positive");
        if (reps == 0) throw ArgumentError("ablate: reps must be positive");
        check_kernel_size(static_cast<long>(kernel));
        if (resolution < kernel) throw ArgumentError("ablate: resolution is smaller than the kernel");
    }
};

struct ProbeResult {
    std::size_t steps = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    bool diverged = false;
};

struct AblateRow {
    std::string config;
    std::size_t param_count = 0;
    double forward_ms = 0.0;
    double gradcheck_error = 0.0;
    bool gradcheck_pass = false;
    std::optional<ProbeResult> probe;
};

/// Regression of a stage onto a fixed random full ATConv teacher with AdamW (lr 1e-2).
/// Diverged means a non-finite loss or a final loss above the initial one.
inline ProbeResult kernel_probe(const RoadmapStage& stage, std::size_t steps, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t C = 8, K = 3;
    const auto x = random_tensor<double>({4, C, 8, 8}, rng);
    const auto teacher = ATConvParams<double>::init(C, K, rng);
    const auto target = atconv_forward(x, teacher, ATConvConfig<double>::full());
    auto p = ATConvParams<double>::init(C, K, rng);
    auto cfg = make_config<double>(stage, random_matrix<double>(C, K * K, rng, -0.3, 0.3));
    AdamState<double> state;
    const AdamHyper hyper{1e-2, 0.9, 0.999, 1e-8, 0.0};

    ProbeResult r;
    for (std::size_t step = 0; step <= steps; ++step) {
        ATConvCache<double> cache;
        const auto y = atconv_forward(x, p, cfg, &cache);
        Tensor4<double> dy(y.shape());
        double loss = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            const double d = y[i] - target[i];
            loss += d * d;
            dy[i] = 2.0 * d / double(y.size());
        }
        loss /= double(y.size());
        if (step == 0) r.initial_loss = loss;
        r.final_loss = loss;
        r.steps = step;
        if (!std::isfinite(loss)) {
            r.diverged = true;
            return r;
        }
        if (step == steps) break;
        auto g = atconv_backward(cache, p, cfg, dy);
        std::vector<std::span<double>> ps;
        std::vector<std::span<const double>> gs;
        auto pv = p.views();
        auto gv = g.views();
        for (std::size_t i = 0; i < pv.size(); ++i) {
            ps.push_back(pv[i].second);
            gs.push_back(gv[i].second);
        }
        if (cfg.static_kernel) {
            ps.push_back(cfg.static_kernel->data());
            gs.push_back(g.static_kernel.data());
        }
        try {
            adam_step(ps, gs, state, hyper);
        } catch (const NumericError&) {
            r.diverged = true;
            return r;
        }
    }
    r.diverged = r.final_loss > r.initial_loss;
    return r;
}

inline std::vector<AblateRow> ablate_run(const AblateSpec& spec) {
    spec.validate();
    std::vector<AblateRow> rows;
    for (const auto& stage : roadmap_stages()) {
        Rng rng(spec.seed);
        AblateRow row;
        row.config = stage.name;
        const auto p = ATConvParams<float>::init(spec.channels, spec.kernel, rng);
        const auto cfg = make_config<float>(stage, random_matrix<float>(spec.channels, spec.kernel * spec.kernel, rng));
        row.param_count = param_count(p, cfg);

        const auto x = random_tensor<float>({spec.batch, spec.channels, spec.resolution, spec.resolution}, rng);
        PinThreads pin(1);
        atconv_forward(x, p, cfg);
        std::vector<double> ms;
        for (std::size_t i = 0; i < spec.reps; ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            atconv_forward(x, p, cfg);
            ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        }
        row.forward_ms = percentile(ms, 0.5);

        const auto report = gradcheck_stage(stage, spec.seed);
        row.gradcheck_error = report.max_rel_error();
        row.gradcheck_pass = report.pass();
        if (stage.kernel_mod == KernelMod::softmax && spec.probe_steps > 0) {
            row.probe = kernel_probe(stage, spec.probe_steps, spec.seed);
        }
        rows.push_back(row);
    }
    return rows;
}

inline constexpr const char* kAblateCsvHeader =
    "config,param_count,forward_ms,gradcheck_pass,probe_initial_loss,probe_final_loss,probe_diverged";

/// Probe columns are NA for stages without a probe.
inline void write_ablate_csv(std::ostream& os, const std::vector<AblateRow>& rows) {
    os << kAblateCsvHeader << '\n';
    for (const auto& r : rows) {
        os << r.config << ',' << r.param_count << ',' << format_bench_value(r.forward_ms) << ','
           << (r.gradcheck_pass ? "true" : "false") << ',';
        if (r.probe) {
            os << format_bench_value(r.probe->initial_loss) << ',' << format_bench_value(r.probe->final_loss) << ','
               << (r.probe->diverged ? "true" : "false") << '\n';
        } else {
            os << "NA,NA,NA\n";
        }
    }
}

} // namespace atconv
