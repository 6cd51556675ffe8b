#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "atconv/baselines.hpp"
#include "test_support.hpp"

using namespace atconv;
using atconv::test::fd_gradient;
using atconv::test::rel_error;
using atconv::test::weighted_sum;

namespace {

Tensor4<double> conv_oracle(const Tensor4<double>& x, const StaticConvParams<double>& p) {
    const auto& s = x.shape();
    const long k = static_cast<long>(p.kernel());
    Tensor4<double> y(s.b, p.out_channels(), s.h, s.w);
    for (std::size_t b = 0; b < s.b; ++b)
        for (std::size_t o = 0; o < p.out_channels(); ++o)
            for (long h = 0; h < long(s.h); ++h)
                for (long w = 0; w < long(s.w); ++w) {
                    double acc = p.bias.empty() ? 0.0 : p.bias[o];
                    for (std::size_t i = 0; i < s.c; ++i)
                        for (long u = 0; u < k; ++u)
                            for (long v = 0; v < k; ++v) {
                                const long hh = h + u - k / 2, ww = w + v - k / 2;
                                if (hh < 0 || ww < 0 || hh >= long(s.h) || ww >= long(s.w)) continue;
                                acc += p.weights(o, i, u, v) * x(b, i, hh, ww);
                            }
                    y(b, o, h, w) = acc;
                }
    return y;
}

ToySAParams<double> zero_sa(std::size_t c, std::size_t d) {
    return {Matrix<double>(d, c), Matrix<double>(d, c), Matrix<double>(d, c), Matrix<double>(c, d),
            std::sqrt(double(d))};
}

} // namespace

// ---------------------------------------------------------------- static conv

TEST(StaticConv, OneByOneIsBitIdenticalToConv1x1) {
    Rng rng(1);
    auto p = StaticConvParams<double>::init(4, 3, 1, rng);
    p.bias = random_vector<double>(4, rng);
    const auto x = random_tensor<double>({2, 3, 5, 6}, rng);
    Matrix<double> w(4, 3);
    std::copy(p.weights.data().begin(), p.weights.data().end(), w.data().begin());
    EXPECT_EQ(static_conv(x, p).data(), conv1x1<double>(x, w, p.bias).data());
}

TEST(StaticConv, DeltaKernelIsIdentity) {
    Rng rng(2);
    StaticConvParams<double> p{Tensor4<double>(3, 3, 3, 3), {}};
    for (std::size_t c = 0; c < 3; ++c) p.weights(c, c, 1, 1) = 1.0;
    const auto x = random_tensor<double>({1, 3, 4, 5}, rng);
    EXPECT_EQ(static_conv(x, p).data(), x.data());
}

TEST(StaticConv, MatchesQuadLoopOracle) {
    Rng rng(3);
    auto p = StaticConvParams<double>::init(3, 2, 3, rng);
    p.bias = random_vector<double>(3, rng);
    const auto x = random_tensor<double>({2, 2, 5, 4}, rng);
    EXPECT_LT(max_abs_diff(static_conv(x, p), conv_oracle(x, p)), 1e-12);
}

TEST(StaticConv, GradientsMatchFiniteDifferences) {
    Rng rng(4);
    auto p = StaticConvParams<double>::init(3, 2, 3, rng);
    p.bias = random_vector<double>(3, rng);
    auto x = random_tensor<double>({2, 2, 5, 4}, rng);
    const auto r = atconv::test::random_weights(2 * 3 * 5 * 4, 5);
    auto loss = [&] { return weighted_sum(static_conv(x, p).data(), r); };
    const auto g = static_conv_backward(x, p, Tensor4<double>({2, 3, 5, 4}, r));
    EXPECT_LT(rel_error(g.input.data(), fd_gradient(x.data(), loss)), 1e-6);
    EXPECT_LT(rel_error(g.weights.data(), fd_gradient(p.weights.data(), loss)), 1e-6);
    EXPECT_LT(rel_error(g.bias, fd_gradient(p.bias, loss)), 1e-6);
}

TEST(StaticConv, ShapeErrors) {
    Rng rng(5);
    const auto p = StaticConvParams<double>::init(3, 2, 3, rng);
    EXPECT_THROW(static_conv(Tensor4<double>(1, 3, 4, 4), p), DimensionError);
    EXPECT_THROW(static_conv(Tensor4<double>(1, 2, 4, 4), StaticConvParams<double>{Tensor4<double>(1, 2, 2, 2), {}}),
                 ArgumentError);
}

// ---------------------------------------------------------------- static depthwise

TEST(StaticDepthwise, EqualsDynamicDepthwiseWithBroadcastKernels) {
    Rng rng(6);
    const auto x = random_tensor<double>({3, 4, 6, 5}, rng);
    const auto kernels = random_tensor<double>({1, 4, 3, 3}, rng);
    DynamicKernel<double> dk{Tensor4<double>(3, 4, 3, 3)};
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t c = 0; c < 4; ++c)
            std::copy(kernels.plane(0, c).begin(), kernels.plane(0, c).end(), dk.alpha.plane(b, c).begin());
    EXPECT_LT(max_abs_diff(static_depthwise(x, kernels), dyn_depthwise(x, dk)), 1e-12);
}

TEST(StaticDepthwise, OnesKernelIsBoxSumAndZerosGiveZero) {
    Tensor4<double> x(1, 1, 3, 3);
    std::iota(x.data().begin(), x.data().end(), 1.0);
    const auto box = static_depthwise(x, Tensor4<double>(1, 1, 3, 3, 1.0));
    EXPECT_EQ(box(0, 0, 1, 1), 45.0);
    EXPECT_EQ(box(0, 0, 0, 0), 12.0);
    const auto zero = static_depthwise(x, Tensor4<double>(1, 1, 3, 3));
    for (double v : zero.data()) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(static_depthwise(x, Tensor4<double>(1, 2, 3, 3)), DimensionError);
}

TEST(StaticDepthwise, InputGradientMatchesFiniteDifferences) {
    Rng rng(7);
    auto x = random_tensor<double>({2, 3, 5, 5}, rng);
    const auto kernels = random_tensor<double>({1, 3, 3, 3}, rng);
    const auto r = atconv::test::random_weights(x.size(), 8);
    auto loss = [&] { return weighted_sum(static_depthwise(x, kernels).data(), r); };
    const auto g = static_depthwise_input_grad(kernels, Tensor4<double>(x.shape(), r));
    EXPECT_LT(rel_error(g.data(), fd_gradient(x.data(), loss)), 1e-6);
}

// ---------------------------------------------------------------- toy self-attention

TEST(ToySA, SingleTokenIsProjectionComposition) {
    Rng rng(9);
    const auto p = ToySAParams<double>::init(3, 4, rng);
    const auto x = random_tensor<double>({2, 3, 1, 1}, rng);
    const auto y = toy_self_attention(x, p);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 3; ++c) {
            double expected = 0.0;
            for (std::size_t j = 0; j < 4; ++j) {
                double v = 0.0;
                for (std::size_t i = 0; i < 3; ++i) v += p.w_v(j, i) * x(b, i, 0, 0);
                expected += p.w_o(c, j) * v;
            }
            EXPECT_NEAR(y(b, c, 0, 0), expected, 1e-14);
        }
}

TEST(ToySA, ZeroQueriesGiveMeanPooledValues) {
    Rng rng(10);
    auto p = ToySAParams<double>::init(3, 4, rng);
    p.w_q = Matrix<double>(4, 3);
    const auto x = random_tensor<double>({1, 3, 4, 3}, rng);
    ToySACache<double> cache;
    const auto y = toy_self_attention(x, p, &cache);
    for (double a : cache.attn[0]) EXPECT_NEAR(a, 1.0 / 12.0, 1e-15);
    for (std::size_t c = 0; c < 3; ++c) {
        double expected = 0.0;
        for (std::size_t j = 0; j < 4; ++j) {
            double v = 0.0;
            for (std::size_t i = 0; i < 3; ++i) {
                const auto plane = x.plane(0, i);
                v += p.w_v(j, i) * std::accumulate(plane.begin(), plane.end(), 0.0) / 12.0;
            }
            expected += p.w_o(c, j) * v;
        }
        for (double yv : y.plane(0, c)) EXPECT_NEAR(yv, expected, 1e-13);
    }
}

TEST(ToySA, AttentionRowsSumToOne) {
    Rng rng(11);
    const auto p = ToySAParams<double>::init(4, 8, rng);
    const auto x = random_tensor<double>({2, 4, 5, 5}, rng, -3.0, 3.0);
    ToySACache<double> cache;
    toy_self_attention(x, p, &cache);
    for (const auto& attn : cache.attn)
        for (std::size_t i = 0; i < 25; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < 25; ++j) s += attn[i * 25 + j];
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
}

TEST(ToySA, SoftmaxJacobianHasMutualInhibitionForm) {
    Rng rng(12);
    const std::size_t d = 8;
    for (std::size_t n : {2u, 5u, 16u}) {
        for (double tau : {1.0, std::sqrt(double(d))}) {
            const auto scores = random_vector<double>(n, rng, -3.0, 3.0);
            const auto alpha = softmax<double>(scores, tau);
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<double> onehot(n, 0.0);
                onehot[i] = 1.0;
                const auto row = softmax_backward<double>(alpha, onehot, tau);
                for (std::size_t j = 0; j < n; ++j) {
                    const double expected = ((i == j ? alpha[i] : 0.0) - alpha[i] * alpha[j]) / tau;
                    EXPECT_NEAR(row[j], expected, 1e-10);
                }
            }
        }
    }
}

TEST(ToySA, GradientsMatchFiniteDifferences) {
    Rng rng(13);
    auto p = ToySAParams<double>::init(3, 4, rng);
    auto x = random_tensor<double>({2, 3, 3, 4}, rng);
    const auto r = atconv::test::random_weights(x.size(), 14);
    auto loss = [&] { return weighted_sum(toy_self_attention(x, p).data(), r); };
    ToySACache<double> cache;
    toy_self_attention(x, p, &cache);
    const auto g = toy_self_attention_backward(cache, p, Tensor4<double>(x.shape(), r));
    EXPECT_LT(rel_error(g.input.data(), fd_gradient(x.data(), loss)), 1e-6);
    EXPECT_LT(rel_error(g.w_q.data(), fd_gradient(p.w_q.data(), loss)), 1e-6);
    EXPECT_LT(rel_error(g.w_k.data(), fd_gradient(p.w_k.data(), loss)), 1e-6);
    EXPECT_LT(rel_error(g.w_v.data(), fd_gradient(p.w_v.data(), loss)), 1e-6);
    EXPECT_LT(rel_error(g.w_o.data(), fd_gradient(p.w_o.data(), loss)), 1e-6);
}

TEST(ToySA, TokenPermutationEquivariance) {
    Rng rng(15);
    const auto p = ToySAParams<double>::init(3, 4, rng);
    const auto x = random_tensor<double>({1, 3, 4, 4}, rng);
    std::vector<std::size_t> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Tensor4<double> xp(x.shape());
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 16; ++i) xp.plane(0, c)[i] = x.plane(0, c)[perm[i]];
    const auto y = toy_self_attention(x, p);
    const auto yp = toy_self_attention(xp, p);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(yp.plane(0, c)[i], y.plane(0, c)[perm[i]], 1e-10);
}

TEST(ToySA, Validation) {
    auto p = zero_sa(3, 2);
    p.tau = 0.0;
    EXPECT_THROW(toy_self_attention(Tensor4<double>(1, 3, 2, 2), p), ArgumentError);
    EXPECT_THROW(toy_self_attention(Tensor4<double>(1, 2, 2, 2), zero_sa(3, 2)), DimensionError);
    EXPECT_THROW(toy_self_attention_backward(ToySACache<double>{}, zero_sa(3, 2), Tensor4<double>(1, 3, 2, 2)),
                 StateError);
}

// ---------------------------------------------------------------- Jacobian probe

TEST(JacobianProbe, StaticConvSliceIsKernelInsideNeighborhood) {
    Rng rng(16);
    const auto params = StaticConvParams<double>::init(3, 2, 3, rng);
    const StaticConvOp<double> op(params);
    const auto x1 = random_tensor<double>({1, 2, 7, 7}, rng);
    const auto x2 = random_tensor<double>({1, 2, 7, 7}, rng);
    const std::size_t hs = 3, ws = 2;
    const auto j1 = conv_jacobian_probe<double>(op, x1, hs, ws);
    for (std::size_t co = 0; co < 3; ++co)
        for (std::size_t ci = 0; ci < 2; ++ci)
            for (std::size_t h = 0; h < 7; ++h)
                for (std::size_t w = 0; w < 7; ++w) {
                    const long u = long(h) - long(hs) + 1, v = long(w) - long(ws) + 1;
                    const bool inside = u >= 0 && u < 3 && v >= 0 && v < 3;
                    EXPECT_NEAR(j1(co, ci, h, w), inside ? params.weights(co, ci, u, v) : 0.0, 1e-12);
                }
    EXPECT_EQ(j1.data(), conv_jacobian_probe<double>(op, x2, hs, ws).data());
}

TEST(JacobianProbe, IdentityIsOneHot) {
    Rng rng(17);
    const auto x = random_tensor<double>({1, 2, 4, 4}, rng);
    const auto j = conv_jacobian_probe<double>(IdentityOp<double>{}, x, 1, 2);
    for (std::size_t co = 0; co < 2; ++co)
        for (std::size_t ci = 0; ci < 2; ++ci)
            for (std::size_t h = 0; h < 4; ++h)
                for (std::size_t w = 0; w < 4; ++w)
                    EXPECT_EQ(j(co, ci, h, w), (co == ci && h == 1 && w == 2) ? 1.0 : 0.0);
    EXPECT_THROW(conv_jacobian_probe<double>(IdentityOp<double>{}, x, 4, 0), ArgumentError);
}

TEST(JacobianProbe, OneKernelEntryMovesOnlyItsJacobianEntries) {
    Rng rng(18);
    auto params = StaticConvParams<double>::init(2, 2, 3, rng);
    const auto x = random_tensor<double>({1, 2, 6, 6}, rng);
    const auto before = conv_jacobian_probe<double>(StaticConvOp<double>(params), x, 3, 3);
    params.weights(1, 0, 2, 0) += 0.5;
    const auto after = conv_jacobian_probe<double>(StaticConvOp<double>(params), x, 3, 3);
    for (std::size_t i = 0; i < before.size(); ++i) {
        const bool target = i == after.index(1, 0, 4, 2);
        if (target) {
            EXPECT_NEAR(after[i] - before[i], 0.5, 1e-15);
        } else {
            EXPECT_EQ(after[i], before[i]);
        }
    }
}

TEST(JacobianProbe, ATConvSliceDependsOnInputContent) {
    Rng rng(19);
    const auto p = ATConvParams<double>::init(3, 3, rng);
    const ATConvOp<double> op(p, ATConvConfig<double>::full());
    const auto x1 = random_tensor<double>({1, 3, 8, 8}, rng);
    const auto x2 = random_tensor<double>({1, 3, 8, 8}, rng);
    const auto d = max_abs_diff(conv_jacobian_probe<double>(op, x1, 4, 4), conv_jacobian_probe<double>(op, x2, 4, 4));
    RecordProperty("atconv_slice_difference", std::to_string(d));
    EXPECT_GT(d, 1e-3);
}
