#pragma once

// Operator latency and working-set scaling.
//
// Peak bytes are measured only in programs that expand ATCONV_INSTALL_ALLOC_HOOK
// in exactly one translation unit; elsewhere rows fall back to the model.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <memory>
#include <new>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "atconv/baselines.hpp"
#include "atconv/complexity.hpp"
#include "atconv/parallel.hpp"
#include "json.hpp"

namespace atconv {

namespace alloc {

inline std::atomic<bool> hook_installed{false};
inline std::atomic<std::size_t> live_bytes{0};
inline std::atomic<std::size_t> peak_bytes{0};

inline void on_alloc(std::size_t n) {
    const std::size_t now = live_bytes.fetch_add(n, std::memory_order_relaxed) + n;
    std::size_t peak = peak_bytes.load(std::memory_order_relaxed);
    while (now > peak && !peak_bytes.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
    }
}

inline void on_free(std::size_t n) { live_bytes.fetch_sub(n, std::memory_order_relaxed); }

/// Starts a new peak window at the current live size; returns that baseline.
inline std::size_t reset_peak() {
    const std::size_t now = live_bytes.load(std::memory_order_relaxed);
    peak_bytes.store(now, std::memory_order_relaxed);
    return now;
}

inline constexpr std::size_t kHeader = 16;

[[gnu::noinline]] inline void* counted_malloc(std::size_t n) {
    void* raw = std::malloc(n + kHeader);
    if (raw == nullptr) return nullptr;
    *static_cast<std::size_t*>(raw) = n;
    on_alloc(n);
    return static_cast<char*>(raw) + kHeader;
}

[[gnu::noinline]] inline void counted_free(void* p) noexcept {
    if (p == nullptr) return;
    void* raw = static_cast<char*>(p) - kHeader;
    on_free(*static_cast<std::size_t*>(raw));
    std::free(raw);
}

} // namespace alloc

// Replaces the global (non-aligned) operator new/delete with byte-counting versions.
#define ATCONV_INSTALL_ALLOC_HOOK                                                                           \
    void* operator new(std::size_t n) {                                                                     \
        if (void* p = ::atconv::alloc::counted_malloc(n)) return p;                                        \
        throw std::bad_alloc();                                                                             \
    }                                                                                                       \
    void* operator new[](std::size_t n) { return ::operator new(n); }                                       \
    void* operator new(std::size_t n, const std::nothrow_t&) noexcept {                                     \
        return ::atconv::alloc::counted_malloc(n);                                                          \
    }                                                                                                       \
    void* operator new[](std::size_t n, const std::nothrow_t&) noexcept {                                   \
        return ::atconv::alloc::counted_malloc(n);                                                          \
    }                                                                                                       \
    void operator delete(void* p) noexcept { ::atconv::alloc::counted_free(p); }                            \
    void operator delete[](void* p) noexcept { ::atconv::alloc::counted_free(p); }                          \
    void operator delete(void* p, std::size_t) noexcept { ::atconv::alloc::counted_free(p); }               \
    void operator delete[](void* p, std::size_t) noexcept { ::atconv::alloc::counted_free(p); }             \
    void operator delete(void* p, const std::nothrow_t&) noexcept { ::atconv::alloc::counted_free(p); }     \
    void operator delete[](void* p, const std::nothrow_t&) noexcept { ::atconv::alloc::counted_free(p); }   \
    static const bool atconv_alloc_hook_marker = [] {                                                       \
        ::atconv::alloc::hook_installed = true;                                                             \
        return true;                                                                                        \
    }();

inline const std::vector<std::string>& bench_operator_names() {
    static const std::vector<std::string> names = {"atconv", "toy_sa", "static_dwconv", "static_conv"};
    return names;
}

struct BenchSpec {
    std::vector<std::string> operators = bench_operator_names();
    std::size_t batch = 8;
    std::size_t channels = 64;
    std::size_t kernel = 3;
    std::vector<std::size_t> resolutions = {16, 24, 32, 48};
    std::size_t reps = 10;
    std::size_t warmup = 3;
    std::string dtype = "f32";
    bool dry_run = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (reps < 3) throw ArgumentError("bench: reps must be at least 3");
        if (resolutions.empty()) throw ArgumentError("bench: no resolutions given");
        for (std::size_t i = 0; i < resolutions.size(); ++i) {
            if (resolutions[i] == 0) throw ArgumentError("bench: resolutions must be positive");
            if (i > 0 && resolutions[i] <= resolutions[i - 1]) {
                throw ArgumentError("bench: resolutions must be strictly ascending");
            }
        }
        if (batch == 0 || channels == 0) throw ArgumentError("bench: batch and channels must be positive");
        check_kernel_size(static_cast<long>(kernel));
        if (dtype != "f32" && dtype != "f64") throw ArgumentError("bench: dtype must be f32 or f64");
        for (const auto& op : operators) {
            const auto& known = bench_operator_names();
            if (std::find(known.begin(), known.end(), op) == known.end()) {
                throw ArgumentError("bench: unknown operator '" + op + "'");
            }
        }
    }
};

struct BenchRow {
    std::string op;
    std::size_t H = 0;
    double lat_med_ms = 0.0;
    double lat_p10_ms = 0.0;
    double lat_p90_ms = 0.0;
    std::optional<std::uint64_t> peak_bytes_measured;
    std::uint64_t peak_bytes_model = 0;
    bool failed = false;
    std::string error;

    bool measured() const { return peak_bytes_measured.has_value(); }
};

inline constexpr const char* kBenchCsvHeader =
    "operator,H,lat_med_ms,lat_p10_ms,lat_p90_ms,peak_bytes_measured,peak_bytes_model";

/// Linear interpolation between order statistics.
inline double percentile(std::vector<double> v, double q) {
    if (v.empty()) throw ArgumentError("percentile: no samples");
    std::sort(v.begin(), v.end());
    const double pos = q * double(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

/// Output tensor plus whatever the operator must hold beyond it: the attention
/// map and q,k,v for toy_sa, the dynamic kernels for atconv, the weights for the
/// static convolutions.
inline std::uint64_t bench_peak_model(const std::string& op, const ShapeSpec& s) {
    const auto mem = memory(s);
    const std::uint64_t bnc = s.batch * s.tokens() * s.channels;
    const std::uint64_t kk = s.kernel * s.kernel;
    if (op == "toy_sa") return mem.sa_bytes;
    if (op == "atconv") return mem.atconv_bytes;
    if (op == "static_dwconv") return s.elt_bytes * (bnc + s.channels * kk);
    if (op == "static_conv") return s.elt_bytes * (bnc + s.channels * s.channels * kk);
    throw ArgumentError("bench: unknown operator '" + op + "'");
}

inline std::uint64_t bench_flops_model(const std::string& op, const ShapeSpec& s) {
    const std::uint64_t bn = s.batch * s.tokens();
    const std::uint64_t kk = s.kernel * s.kernel;
    if (op == "toy_sa") return sa_flops(s).total();
    if (op == "atconv") return atconv_flops(s).total();
    if (op == "static_dwconv") return 2 * bn * s.channels * kk;
    if (op == "static_conv") return 2 * bn * s.channels * s.channels * kk;
    throw ArgumentError("bench: unknown operator '" + op + "'");
}

template <class T>
std::unique_ptr<Operator<T>> make_bench_operator(const std::string& op, std::size_t c, std::size_t k, Rng& rng) {
    if (op == "atconv") {
        return std::make_unique<ATConvOp<T>>(ATConvParams<T>::init(c, k, rng), ATConvConfig<T>::full());
    }
    if (op == "toy_sa") return std::make_unique<ToySAOp<T>>(ToySAParams<T>::init(c, c, rng));
    if (op == "static_dwconv") {
        const double bound = 1.0 / double(k);
        return std::make_unique<StaticDepthwiseOp<T>>(random_tensor<T>({1, c, k, k}, rng, -bound, bound));
    }
    if (op == "static_conv") return std::make_unique<StaticConvOp<T>>(StaticConvParams<T>::init(c, c, k, rng));
    throw ArgumentError("bench: unknown operator '" + op + "'");
}

namespace detail {

template <class T>
BenchRow bench_one(const Operator<T>& op, const std::string& name, const BenchSpec& spec, std::size_t H, Rng& rng) {
    BenchRow row;
    row.op = name;
    row.H = H;
    const ShapeSpec shape{spec.batch, spec.channels, H, H, spec.kernel, sizeof(T)};
    row.peak_bytes_model = bench_peak_model(name, shape);
    if (spec.dry_run) {
        // Stub clock: one nanosecond per modelled FLOP.
        row.lat_med_ms = row.lat_p10_ms = row.lat_p90_ms = double(bench_flops_model(name, shape)) * 1e-6;
        return row;
    }
    try {
        const auto x = random_tensor<T>({spec.batch, spec.channels, H, H}, rng);
        PinThreads pin(1);
        for (std::size_t i = 0; i < spec.warmup; ++i) op.forward(x);
        std::vector<double> ms;
        std::size_t peak = 0;
        for (std::size_t i = 0; i < spec.reps; ++i) {
            const std::size_t base = alloc::reset_peak();
            const auto t0 = std::chrono::steady_clock::now();
            {
                const auto y = op.forward(x);
            }
            const auto t1 = std::chrono::steady_clock::now();
            peak = std::max(peak, alloc::peak_bytes.load() - base);
            ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        row.lat_med_ms = percentile(ms, 0.5);
        row.lat_p10_ms = percentile(ms, 0.1);
        row.lat_p90_ms = percentile(ms, 0.9);
        if (alloc::hook_installed) row.peak_bytes_measured = peak;
    } catch (const std::bad_alloc&) {
        row.failed = true;
        row.error = "allocation failed";
    } catch (const Error& e) {
        row.failed = true;
        row.error = e.what();
    }
    return row;
}

template <class T>
std::vector<BenchRow> bench_typed(const BenchSpec& spec) {
    std::vector<BenchRow> rows;
    for (const auto& name : spec.operators) {
        Rng rng(spec.seed);
        const auto op = make_bench_operator<T>(name, spec.channels, spec.kernel, rng);
        for (std::size_t H : spec.resolutions) rows.push_back(bench_one<T>(*op, name, spec, H, rng));
    }
    return rows;
}

} // namespace detail

inline std::vector<BenchRow> bench_run(const BenchSpec& spec) {
    spec.validate();
    return spec.dtype == "f64" ? detail::bench_typed<double>(spec) : detail::bench_typed<float>(spec);
}

inline std::string format_bench_value(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

/// Failed rows and unmeasured peaks are written as NA.
inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
    os << kBenchCsvHeader << '\n';
    for (const auto& r : rows) {
        os << r.op << ',' << r.H << ',';
        if (r.failed) {
            os << "NA,NA,NA,NA,";
        } else {
            os << format_bench_value(r.lat_med_ms) << ',' << format_bench_value(r.lat_p10_ms) << ','
               << format_bench_value(r.lat_p90_ms) << ','
               << (r.measured() ? std::to_string(*r.peak_bytes_measured) : std::string("NA")) << ',';
        }
        os << r.peak_bytes_model << '\n';
    }
}

inline nlohmann::json to_json(const BenchRow& r) {
    nlohmann::json j = {{"operator", r.op},
                        {"H", r.H},
                        {"lat_med_ms", r.lat_med_ms},
                        {"lat_p10_ms", r.lat_p10_ms},
                        {"lat_p90_ms", r.lat_p90_ms},
                        {"peak_bytes_model", r.peak_bytes_model},
                        {"measured", r.measured()},
                        {"failed", r.failed}};
    if (r.measured()) j["peak_bytes_measured"] = *r.peak_bytes_measured;
    if (r.failed) j["error"] = r.error;
    return j;
}

/// Least-squares slope of log(latency) against log(N = H^2) for one operator.
inline double latency_slope(const std::vector<BenchRow>& rows, const std::string& op) {
    std::vector<double> xs, ys;
    for (const auto& r : rows) {
        if (r.op != op || r.failed || r.lat_med_ms <= 0.0) continue;
        xs.push_back(std::log(double(r.H) * double(r.H)));
        ys.push_back(std::log(r.lat_med_ms));
    }
    if (xs.size() < 2) throw DegenerateError("latency_slope: fewer than two usable rows for " + op);
    const double n = double(xs.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sx += xs[i];
        sy += ys[i];
        sxx += xs[i] * xs[i];
        sxy += xs[i] * ys[i];
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

} // namespace atconv
