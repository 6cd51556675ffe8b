#include <gtest/gtest.h>

#include <cmath>

#include "atconv/baselines.hpp"
#include "atconv/complexity.hpp"

using namespace atconv;

namespace {

ShapeSpec shape(std::uint64_t b, std::uint64_t c, std::uint64_t h, std::uint64_t w, std::uint64_t k,
                std::uint64_t elt = 4) {
    return {b, c, h, w, k, elt};
}

} // namespace

TEST(SaFlops, UnitShape) {
    const auto f = sa_flops(shape(1, 1, 1, 1, 1));
    EXPECT_EQ(f.projections, 8u);
    EXPECT_EQ(f.attention_map, 2u);
    EXPECT_EQ(f.attention_apply, 2u);
    EXPECT_EQ(f.out_proj, 2u);
    EXPECT_EQ(f.total(), 12u);
}

TEST(SaFlops, DoublingResolutionScalesTerms) {
    const auto a = sa_flops(shape(2, 16, 8, 8, 3));
    const auto b = sa_flops(shape(2, 16, 16, 16, 3));
    EXPECT_EQ(b.attention_map, 16 * a.attention_map);
    EXPECT_EQ(b.attention_apply, 16 * a.attention_apply);
    EXPECT_EQ(b.projections, 4 * a.projections);
}

TEST(SaFlops, DominantTermRatio) {
    const auto f = sa_flops(shape(32, 384, 28, 28, 3));
    const double ratio = double(f.attention_map / 2) / double(f.projections / 8);
    EXPECT_DOUBLE_EQ(ratio, 784.0 / 384.0);
    EXPECT_NEAR(ratio, 2.04, 0.005);
}

TEST(AtconvFlops, AffineInTokens) {
    const auto one = atconv_flops(shape(3, 24, 6, 6, 3));
    const auto two = atconv_flops(shape(3, 24, 12, 6, 3));
    const std::uint64_t constant = 3 * (2 * 24 * 81 * 2 / 2 + 24 * 9);
    EXPECT_EQ(2 * one.total() - two.total(), constant);
    EXPECT_EQ(two.conv, 2 * one.conv);
    EXPECT_EQ(two.projections, 2 * one.projections);
}

TEST(AtconvFlops, FourfoldWhenResolutionDoubles) {
    const auto a = atconv_flops(shape(2, 16, 8, 8, 3));
    const auto b = atconv_flops(shape(2, 16, 16, 16, 3));
    EXPECT_EQ(b.conv, 4 * a.conv);
    EXPECT_EQ(b.projections, 4 * a.projections);
}

TEST(AtconvFlops, ConvTermIsSmallAtWideChannels) {
    const auto f = atconv_flops(shape(32, 384, 28, 28, 3));
    EXPECT_LT(double(f.conv), 0.03 * double(f.total()));
}

TEST(AtconvFlops, UnitShapeHandCount) {
    // conv1x1 2, pool 1, W_gen 2, modulation 1, depthwise 2, value and output 4.
    const auto f = atconv_flops(shape(1, 1, 1, 1, 1));
    EXPECT_EQ(f.context_to_kernel, 6u);
    EXPECT_EQ(f.conv, 2u);
    EXPECT_EQ(f.projections, 4u);
}

TEST(Memory, WorkedExampleAt28) {
    const auto m = memory(shape(32, 384, 28, 28, 3, 2));
    EXPECT_EQ(m.sa_bytes, 97140736u);
    EXPECT_NEAR(to_mib(m.sa_bytes), 92.6, 0.1);
    EXPECT_NEAR(to_mib(m.atconv_bytes), 18.6, 0.1);
    EXPECT_NEAR(100.0 * m.reduction, 79.9, 0.2);
    EXPECT_DOUBLE_EQ(m.reduction, 1.0 - double(m.atconv_bytes) / double(m.sa_bytes));
}

TEST(Memory, At56IsComputedAndFlagged) {
    const auto r = complexity_report(shape(32, 384, 56, 56, 3, 2));
    const double expected_sa = 2.0 * (3.0 * 32 * 3136 * 384 + 32.0 * 3136 * 3136);
    const double expected_at = 2.0 * (32.0 * 3136 * 384 + 32.0 * 384 * 9);
    EXPECT_EQ(double(r.mem.sa_bytes), expected_sa);
    EXPECT_EQ(double(r.mem.atconv_bytes), expected_at);
    EXPECT_NEAR(r.mem.reduction, 0.91, 0.01);
    const auto j = to_json(r);
    ASSERT_TRUE(j["metadata"].contains("discrepancy"));
    EXPECT_NE(j["metadata"]["discrepancy"].get<std::string>().find("91.0%"), std::string::npos);
    EXPECT_FALSE(to_json(complexity_report(shape(32, 384, 28, 28, 3, 2)))["metadata"].contains("discrepancy"));
}

TEST(Memory, DegenerateShapesGiveZero) {
    const auto m = memory(shape(4, 8, 0, 0, 0, 2));
    EXPECT_EQ(m.sa_bytes, 0u);
    EXPECT_EQ(m.atconv_bytes, 0u);
}

TEST(Memory, ExponentsInTokens) {
    const auto n1 = memory(shape(1, 4, 8, 8, 3));
    const auto n2 = memory(shape(1, 4, 16, 8, 3));
    const auto n4 = memory(shape(1, 4, 16, 16, 3));
    // Quadratic part of SA and linear part of ATConv, separated from the N-independent terms.
    const auto sa_quad = [](const MemoryEstimate& m, std::uint64_t n) { return m.sa_bytes - 4 * 3 * n * 4; };
    const auto at_lin = [](const MemoryEstimate& m) { return m.atconv_bytes - 4 * 4 * 9; };
    EXPECT_EQ(sa_quad(n2, 128), 4 * sa_quad(n1, 64));
    EXPECT_EQ(sa_quad(n4, 256), 16 * sa_quad(n1, 64));
    EXPECT_EQ(at_lin(n2), 2 * at_lin(n1));
    EXPECT_EQ(at_lin(n4), 4 * at_lin(n1));
}

TEST(Shape, ValidationAndDtypes) {
    EXPECT_THROW(shape(1, 1, 4, 4, 2).validate(), ArgumentError);
    EXPECT_THROW(shape(0, 1, 4, 4, 3).validate(), ArgumentError);
    EXPECT_THROW(shape(1, 1, 4, 4, 3, 3).validate(), ArgumentError);
    EXPECT_EQ(dtype_elt_bytes("fp16"), 2u);
    EXPECT_EQ(dtype_elt_bytes("f32"), 4u);
    EXPECT_EQ(dtype_elt_bytes("fp64"), 8u);
    EXPECT_THROW(dtype_elt_bytes("int8"), ArgumentError);
}

TEST(Instrumented, AtconvForwardMatchesModel) {
    Rng rng(1);
    const std::size_t B = 2, C = 16, H = 12, W = 10, K = 3;
    const auto p = ATConvParams<double>::init(C, K, rng);
    const auto x = random_tensor<double>({B, C, H, W}, rng);
    FlopScope scope;
    atconv_forward(x, p, ATConvConfig<double>::full());
    const double model = double(atconv_flops(shape(B, C, H, W, K)).total());
    EXPECT_NEAR(double(scope.count()) / model, 1.0, 0.05);
}

TEST(Instrumented, ToySaForwardMatchesModel) {
    Rng rng(2);
    const std::size_t B = 2, C = 8, H = 6, W = 6;
    const auto p = ToySAParams<double>::init(C, C, rng);
    const auto x = random_tensor<double>({B, C, H, W}, rng);
    FlopScope scope;
    toy_self_attention(x, p);
    const double model = double(sa_flops(shape(B, C, H, W, 3)).total());
    EXPECT_NEAR(double(scope.count()) / model, 1.0, 0.05);
}

TEST(ReportJson, WorkedExampleFields) {
    const auto j = to_json(complexity_report(shape(32, 384, 28, 28, 3, 2)));
    EXPECT_NEAR(j["sa_mib"].get<double>(), 92.6, 0.1);
    EXPECT_NEAR(j["atconv_mib"].get<double>(), 18.6, 0.1);
    EXPECT_NEAR(j["reduction_pct"].get<double>(), 79.9, 0.2);
    EXPECT_EQ(j["sa_flops"]["total"].get<std::uint64_t>(),
              j["sa_flops"]["projections"].get<std::uint64_t>() + j["sa_flops"]["attention_map"].get<std::uint64_t>() +
                  j["sa_flops"]["attention_apply"].get<std::uint64_t>());
}
