#pragma once

// Diagnostics on any Operator: influence maps and the scores derived from
// them, the inhibition probe, center-surround contrast and channel effective rank.

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "atconv/baselines.hpp"
#include "atconv/error.hpp"
#include "atconv/parallel.hpp"
#include "atconv/tensor.hpp"
#include "json.hpp"

namespace atconv {

struct Anchor {
    std::size_t h = 0;
    std::size_t w = 0;
};

template <class T>
struct InfluenceMap {
    Anchor anchor;
    Matrix<T> g; // H x W
    std::string source;
};

namespace detail {

inline void check_anchor(Anchor a, std::size_t height, std::size_t width, const char* where) {
    if (a.h >= height || a.w >= width) {
        throw ArgumentError(std::string(where) + ": anchor (" + std::to_string(a.h) + ", " + std::to_string(a.w) +
                            ") outside " + std::to_string(height) + "x" + std::to_string(width));
    }
}

template <class T>
T checked_total(const Matrix<T>& g, const char* where) {
    T total = T(0);
    for (T v : g.data()) {
        if (!std::isfinite(v) || v < T(0)) {
            throw ArgumentError(std::string(where) + ": map must be finite and non-negative");
        }
        total += v;
    }
    if (!(total > T(0))) {
        throw DegenerateError(std::string(where) + ": map has zero mass");
    }
    return total;
}

} // namespace detail

/// G(h,w) = sum over output channels c* and input channels c of |dy[0,c*,anchor] / dx[0,c,h,w]|.
template <class T>
InfluenceMap<T> influence_map(const Operator<T>& op, const Tensor4<T>& x, Anchor anchor) {
    detail::check_anchor(anchor, x.height(), x.width(), "influence_map");
    const Tensor4<T> y = op.forward(x);
    const std::size_t hw = x.height() * x.width();
    std::vector<Vector<T>> per_channel(y.channels(), Vector<T>(hw, T(0)));
    parallel_for(y.channels(), [&](std::size_t co) {
        Tensor4<T> seed(y.shape());
        seed(0, co, anchor.h, anchor.w) = T(1);
        const Tensor4<T> g = op.input_gradient(x, seed);
        for (std::size_t ci = 0; ci < x.channels(); ++ci) {
            const auto src = g.plane(0, ci);
            for (std::size_t i = 0; i < hw; ++i) per_channel[co][i] += std::abs(src[i]);
        }
    });
    InfluenceMap<T> m{anchor, Matrix<T>(x.height(), x.width()), op.name()};
    for (const auto& part : per_channel) {
        for (std::size_t i = 0; i < hw; ++i) m.g.data()[i] += part[i];
    }
    ensure_finite<T>(m.g.data(), "influence_map");
    return m;
}

/// Fraction of the mass of `g` farther than r0 (Euclidean, in pixels) from the anchor.
template <class T>
double far(const Matrix<T>& g, Anchor anchor, double r0) {
    detail::check_anchor(anchor, g.rows(), g.cols(), "far");
    const double total = static_cast<double>(detail::checked_total(g, "far"));
    double outside = 0.0;
    for (std::size_t h = 0; h < g.rows(); ++h) {
        for (std::size_t w = 0; w < g.cols(); ++w) {
            const double dh = double(h) - double(anchor.h);
            const double dw = double(w) - double(anchor.w);
            if (std::sqrt(dh * dh + dw * dw) > r0) {
                outside += static_cast<double>(g(h, w));
            }
        }
    }
    return outside / total;
}

/// Mass outside the k x k window centered on the anchor.
template <class T>
T mass_outside_window(const Matrix<T>& g, Anchor anchor, std::size_t k) {
    const long r = static_cast<long>(k / 2);
    T outside = T(0);
    for (std::size_t h = 0; h < g.rows(); ++h) {
        for (std::size_t w = 0; w < g.cols(); ++w) {
            const long dh = std::abs(long(h) - long(anchor.h));
            const long dw = std::abs(long(w) - long(anchor.w));
            if (dh > r || dw > r) {
                outside += g(h, w);
            }
        }
    }
    return outside;
}

/// q-quantile of the values of `g`, linear interpolation between order statistics.
template <class T>
double quantile(const Matrix<T>& g, double q) {
    if (!(q >= 0.0 && q <= 1.0)) {
        throw ArgumentError("quantile: q must lie in [0, 1]");
    }
    std::vector<double> v(g.data().begin(), g.data().end());
    std::sort(v.begin(), v.end());
    const double pos = q * double(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

/// G-weighted centroid (row, col) of the pixels at or above the q-quantile of G.
template <class T>
std::pair<double, double> routing_centroid(const Matrix<T>& g, double q = 0.9) {
    detail::checked_total(g, "routing_centroid");
    const double thr = quantile(g, q);
    double mass = 0.0, ch = 0.0, cw = 0.0;
    for (std::size_t h = 0; h < g.rows(); ++h) {
        for (std::size_t w = 0; w < g.cols(); ++w) {
            const double v = static_cast<double>(g(h, w));
            if (v >= thr) {
                mass += v;
                ch += v * double(h);
                cw += v * double(w);
            }
        }
    }
    return {ch / mass, cw / mass};
}

/// Off-center suppression: D(h,w) = max(0, r - r') with r = sum_c |y[0,c,h,w]| and r' the same after
/// adding eps_rel * RMS(x) to every channel of x at the anchor. D(anchor) = 0.
template <class T>
Matrix<T> inhibition_map(const Operator<T>& op, const Tensor4<T>& x, Anchor anchor, double eps_rel = 1e-2) {
    detail::check_anchor(anchor, x.height(), x.width(), "inhibition_map");
    if (!(eps_rel > 0.0)) {
        throw ArgumentError("inhibition_map: eps must be positive");
    }
    double sq = 0.0;
    for (T v : x.data()) sq += double(v) * double(v);
    const double rms = std::sqrt(sq / double(x.size()));
    const T eps = static_cast<T>(eps_rel * (rms > 0.0 ? rms : 1.0));

    Tensor4<T> xp = x;
    for (std::size_t c = 0; c < x.channels(); ++c) xp(0, c, anchor.h, anchor.w) += eps;
    const Tensor4<T> y = op.forward(x);
    const Tensor4<T> yp = op.forward(xp);
    Matrix<T> d(x.height(), x.width());
    for (std::size_t h = 0; h < x.height(); ++h) {
        for (std::size_t w = 0; w < x.width(); ++w) {
            if (h == anchor.h && w == anchor.w) continue;
            T r = T(0), rp = T(0);
            for (std::size_t c = 0; c < y.channels(); ++c) {
                r += std::abs(y(0, c, h, w));
                rp += std::abs(yp(0, c, h, w));
            }
            d(h, w) = std::max(T(0), r - rp);
        }
    }
    return d;
}

/// Per-channel separable Gaussian blur, radius ceil(3 sigma), replicate padding, weights sum to 1.
template <class T>
Tensor4<T> gaussian_blur(const Tensor4<T>& x, double sigma) {
    if (!(sigma > 0.0)) {
        throw ArgumentError("gaussian_blur: sigma must be positive");
    }
    const long r = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    for (long i = -r; i <= r; ++i) k[std::size_t(i + r)] = std::exp(-double(i * i) / (2.0 * sigma * sigma));
    const double ksum = std::accumulate(k.begin(), k.end(), 0.0);
    for (auto& v : k) v /= ksum;

    const auto& s = x.shape();
    const long H = long(s.h), W = long(s.w);
    Tensor4<T> tmp(s), out(s);
    for (std::size_t b = 0; b < s.b; ++b) {
        for (std::size_t c = 0; c < s.c; ++c) {
            const auto src = x.plane(b, c);
            auto mid = tmp.plane(b, c);
            auto dst = out.plane(b, c);
            for (long h = 0; h < H; ++h) {
                for (long w = 0; w < W; ++w) {
                    double acc = 0.0;
                    for (long i = -r; i <= r; ++i) {
                        const long ww = std::clamp(w + i, 0L, W - 1);
                        acc += k[std::size_t(i + r)] * double(src[std::size_t(h * W + ww)]);
                    }
                    mid[std::size_t(h * W + w)] = static_cast<T>(acc);
                }
            }
            for (long h = 0; h < H; ++h) {
                for (long w = 0; w < W; ++w) {
                    double acc = 0.0;
                    for (long i = -r; i <= r; ++i) {
                        const long hh = std::clamp(h + i, 0L, H - 1);
                        acc += k[std::size_t(i + r)] * double(mid[std::size_t(hh * W + w)]);
                    }
                    dst[std::size_t(h * W + w)] = static_cast<T>(acc);
                }
            }
        }
    }
    return out;
}

/// Center-surround contrast: E|x - blur(x)| / E|x|.
template <class T>
double csc(const Tensor4<T>& x, double sigma = 1.0) {
    const Tensor4<T> blurred = gaussian_blur(x, sigma);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        num += std::abs(double(x[i]) - double(blurred[i]));
        den += std::abs(double(x[i]));
    }
    if (!(den > 0.0)) {
        throw DegenerateError("csc: input is all zero");
    }
    return num / den;
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, in descending order.
inline std::vector<double> sym_eigenvalues(const Matrix<double>& input, double tol = 1e-12) {
    const std::size_t n = input.rows();
    if (input.cols() != n) {
        throw DimensionError("sym_eigenvalues: matrix is not square");
    }
    if (n > 512) {
        throw ArgumentError("sym_eigenvalues: size " + std::to_string(n) + " exceeds 512");
    }
    double fro = 0.0;
    for (double v : input.data()) fro += v * v;
    fro = std::sqrt(fro);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (std::abs(input(i, j) - input(j, i)) > tol * std::max(1.0, fro)) {
                throw ArgumentError("sym_eigenvalues: matrix is not symmetric");
            }
        }
    }
    Matrix<double> a = input;
    auto sorted_diagonal = [&] {
        std::vector<double> ev(n);
        for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
        std::sort(ev.begin(), ev.end(), std::greater<>());
        return ev;
    };
    for (int sweep = 0; sweep <= 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off = std::max(off, std::abs(a(i, j)));
        if (off <= tol * fro) {
            return sorted_diagonal();
        }
        if (sweep == 100) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    throw NumericError("sym_eigenvalues: no convergence after 100 sweeps");
}

/// Channel covariance over samples indexed by (b, h, w), mean-centered, 1/(n-1) normalization.
template <class T>
Matrix<double> channel_covariance(const Tensor4<T>& x) {
    const std::size_t n = x.batch() * x.height() * x.width();
    const std::size_t c = x.channels();
    if (n < 2) {
        throw DimensionError("channel_covariance: need at least 2 samples");
    }
    std::vector<double> mean(c, 0.0);
    for (std::size_t b = 0; b < x.batch(); ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (T v : x.plane(b, ch)) mean[ch] += double(v);
    for (auto& m : mean) m /= double(n);
    Matrix<double> cov(c, c);
    const std::size_t hw = x.height() * x.width();
    for (std::size_t b = 0; b < x.batch(); ++b) {
        for (std::size_t i = 0; i < c; ++i) {
            const auto pi = x.plane(b, i);
            for (std::size_t j = i; j < c; ++j) {
                const auto pj = x.plane(b, j);
                double acc = 0.0;
                for (std::size_t t = 0; t < hw; ++t) acc += (double(pi[t]) - mean[i]) * (double(pj[t]) - mean[j]);
                cov(i, j) += acc;
            }
        }
    }
    for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = i; j < c; ++j) {
            cov(i, j) /= double(n - 1);
            cov(j, i) = cov(i, j);
        }
    }
    return cov;
}

/// Channel effective rank: exp(entropy of the normalized covariance spectrum) / C.
template <class T>
double cer(const Tensor4<T>& x) {
    std::vector<double> ev = sym_eigenvalues(channel_covariance(x));
    const double top = ev.front();
    if (!(top > 0.0)) {
        throw DegenerateError("cer: covariance is zero");
    }
    double total = 0.0;
    for (auto& l : ev) {
        if (l < 1e-12 * top) l = 0.0;
        total += l;
    }
    double entropy = 0.0;
    for (double l : ev) {
        if (l > 0.0) {
            const double p = l / total;
            entropy -= p * std::log(p);
        }
    }
    return std::exp(entropy) / double(ev.size());
}

// ---------------------------------------------------------------------------
// Combined report

struct AnalysisOptions {
    double r0 = 2.0;
    double quantile = 0.9;
    double sigma = 1.0;
    double eps_rel = 1e-2;
};

template <class T>
struct AnalysisReport {
    InfluenceMap<T> influence;
    double far = 0.0;
    std::pair<double, double> centroid;
    Matrix<T> inhibition;
    double csc = 0.0;
    double cer = 0.0;
};

/// CSC and CER are measured on the operator output.
template <class T>
AnalysisReport<T> analyze(const Operator<T>& op, const Tensor4<T>& x, Anchor anchor, const AnalysisOptions& opt = {}) {
    AnalysisReport<T> r;
    r.influence = influence_map(op, x, anchor);
    r.far = far(r.influence.g, anchor, opt.r0);
    r.centroid = routing_centroid(r.influence.g, opt.quantile);
    r.inhibition = inhibition_map(op, x, anchor, opt.eps_rel);
    const Tensor4<T> y = op.forward(x);
    r.csc = csc(y, opt.sigma);
    r.cer = cer(y);
    return r;
}

template <class T>
nlohmann::json to_json(const AnalysisReport<T>& r, const AnalysisOptions& opt) {
    const auto& g = r.influence.g;
    return {{"anchor", {{"h", r.influence.anchor.h}, {"w", r.influence.anchor.w}}},
            {"far", r.far},
            {"centroid", {{"h", r.centroid.first}, {"w", r.centroid.second}}},
            {"csc", r.csc},
            {"cer", r.cer},
            {"influence_shape", {g.rows(), g.cols()}},
            {"mass_outside_3x3", mass_outside_window(g, r.influence.anchor, 3)},
            {"options", {{"r0", opt.r0}, {"quantile", opt.quantile}, {"sigma", opt.sigma}, {"eps_rel", opt.eps_rel}}},
            {"metadata",
             {{"reconstructed",
               "FAR radius, centroid threshold and inhibition probe are reconstructions; the original protocol is unpublished"},
              {"influence", "sum over input and output channels of |dy[0,c*,anchor]/dx[0,c,h,w]|, batch element 0"},
              {"inhibition", "max(0, sum_c abs(y) - sum_c abs(y after adding eps to every channel at the anchor)), eps = eps_rel * RMS(x)"},
              {"csc_cer_input", "operator output"}}}};
}

/// One row per pixel: h,w,value.
template <class T>
void write_map_csv(std::ostream& os, const Matrix<T>& m) {
    os << "h,w,value\n";
    char buf[64];
    for (std::size_t h = 0; h < m.rows(); ++h)
        for (std::size_t w = 0; w < m.cols(); ++w) {
            std::snprintf(buf, sizeof buf, "%.17g", double(m(h, w)));
            os << h << ',' << w << ',' << buf << '\n';
        }
}

} // namespace atconv
