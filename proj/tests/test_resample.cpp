#include <gtest/gtest.h>

#include <algorithm>

#include "gradcheck_util.hpp"
#include "sct/ops.hpp"
#include "sct/resample.hpp"
#include "sct/rng.hpp"

using namespace sct;
using testutil::random_tensor;

TEST(ScaleSet, Invariants) {
    EXPECT_THROW(ScaleSet(std::vector<std::pair<int, int>>{}), std::invalid_argument);
    EXPECT_THROW(ScaleSet({{32, 32}, {32, 32}}), std::invalid_argument);
    EXPECT_THROW(ScaleSet({{0, 32}}), std::invalid_argument);

    ScaleSet s({{32, 32}, {16, 16}});
    EXPECT_EQ(s.count(), 2);
    EXPECT_EQ(s.index_of(16, 16).value(), 1);
    EXPECT_FALSE(s.index_of(24, 24).has_value());
    EXPECT_EQ(s.nearest(17, 17), 1);
    EXPECT_EQ(s.nearest(30, 30), 0);
}

TEST(ScaleSet, WellSpacedAdvisory) {
    ScaleSet s({{32, 32}, {28, 28}, {16, 16}});
    EXPECT_TRUE(s.well_spaced(4));
    EXPECT_FALSE(s.well_spaced(8));
}

TEST(BilinearResize, IdentityIsBitwise) {
    Rng rng(21);
    Tensor x = random_tensor(Shape(2, 3, 7, 5), rng);
    Tape tape;
    Tensor out = bilinear_resize(tape, x, 7, 5);
    for (std::size_t i = 0; i < x.numel(); ++i)
        ASSERT_EQ(out.data()[i], x.data()[i]) << "elem " << i;
}

TEST(BilinearResize, ConstantPreserved) {
    Tensor x = Tensor::full(Shape(1, 2, 8, 8), 0.73f);
    Tape tape;
    for (const auto& [h, w] : {std::pair{4, 4}, {16, 16}, {5, 11}}) {
        Tensor out = bilinear_resize(tape, x, h, w);
        for (std::size_t i = 0; i < out.numel(); ++i) ASSERT_NEAR(out.data()[i], 0.73f, 1e-6f);
    }
}

TEST(BilinearResize, HalfPixelHandCase) {
    // 1x2 image [0,1] upsampled to 1x4 under half-pixel centers with edge clamp.
    Tensor x = Tensor::from_vector(Shape(1, 1, 1, 2), {0.0f, 1.0f});
    Tape tape;
    Tensor out = bilinear_resize(tape, x, 1, 4);
    const float want[4] = {0.0f, 0.25f, 0.75f, 1.0f};
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(out.data()[i], want[i], 1e-6f);
}

TEST(BilinearResize, OutputWithinInputEnvelope) {
    Rng rng(22);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_tensor(Shape(1, 2, rng.uniform_int(2, 9), rng.uniform_int(2, 9)), rng,
                                 -3.0f, 3.0f);
        const float lo = *std::min_element(x.vec().begin(), x.vec().end());
        const float hi = *std::max_element(x.vec().begin(), x.vec().end());
        Tape tape;
        Tensor out = bilinear_resize(tape, x, rng.uniform_int(1, 12), rng.uniform_int(1, 12));
        for (float v : out.vec()) {
            ASSERT_GE(v, lo - 1e-6f);
            ASSERT_LE(v, hi + 1e-6f);
        }
    }
}

TEST(BilinearResize, DownUpConstant) {
    Tensor x = Tensor::full(Shape(1, 1, 16, 16), -1.234f);
    Tape tape;
    Tensor down = bilinear_resize(tape, x, 7, 7);
    Tensor up = bilinear_resize(tape, down, 16, 16);
    for (float v : up.vec()) ASSERT_NEAR(v, -1.234f, 1e-6f);
}

TEST(BilinearResize, RejectsNonpositiveTarget) {
    Tape tape;
    Tensor x(1, 1, 2, 2);
    EXPECT_THROW(bilinear_resize(tape, x, 0, 4), std::invalid_argument);
}

TEST(AdaptiveAvgPool, GlobalMean) {
    Tensor x = Tensor::from_vector(Shape(1, 1, 2, 2), {1, 2, 3, 4});
    Tape tape;
    Tensor out = adaptive_avg_pool(tape, x, 1, 1);
    EXPECT_NEAR(out.item(), 2.5f, 1e-6f);

    Rng rng(23);
    Tensor y = random_tensor(Shape(2, 3, 5, 4), rng);
    Tensor g = adaptive_avg_pool(tape, y, 1, 1);
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c) {
            double acc = 0.0;
            for (int h = 0; h < 5; ++h)
                for (int w = 0; w < 4; ++w) acc += y.at(n, c, h, w);
            EXPECT_NEAR(g.at(n, c, 0, 0), acc / 20.0, 1e-6);
        }
}

TEST(AdaptiveAvgPool, FullSizeIsIdentity) {
    Rng rng(24);
    Tensor x = random_tensor(Shape(1, 2, 4, 6), rng);
    Tape tape;
    Tensor out = adaptive_avg_pool(tape, x, 4, 6);
    for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_EQ(out.data()[i], x.data()[i]);
}

TEST(AdaptiveAvgPool, WindowRule) {
    // H=3 pooled to h=2: windows [0,2) and [1,3).
    Tensor x = Tensor::from_vector(Shape(1, 1, 3, 1), {1, 2, 4});
    Tape tape;
    Tensor out = adaptive_avg_pool(tape, x, 2, 1);
    EXPECT_NEAR(out.at(0, 0, 0, 0), 1.5f, 1e-6f);
    EXPECT_NEAR(out.at(0, 0, 1, 0), 3.0f, 1e-6f);
}

TEST(AdaptiveAvgPool, RejectsUpscale) {
    Tape tape;
    Tensor x(1, 1, 2, 2);
    EXPECT_THROW(adaptive_avg_pool(tape, x, 3, 2), std::invalid_argument);
}

TEST(AdaptiveMaxPool, GlobalMax) {
    Tensor x = Tensor::from_vector(Shape(1, 1, 2, 2), {1, 2, 3, 4});
    Tape tape;
    EXPECT_FLOAT_EQ(adaptive_max_pool(tape, x, 1, 1).item(), 4.0f);
}

TEST(AdaptiveMaxPool, ConstantImage) {
    Tensor x = Tensor::full(Shape(1, 2, 4, 4), 0.5f);
    Tape tape;
    Tensor out = adaptive_max_pool(tape, x, 2, 2);
    for (float v : out.vec()) EXPECT_FLOAT_EQ(v, 0.5f);
}

TEST(AdaptiveMaxPool, TieRoutesToFirstMax) {
    // Max over [1, 3, 3, 2]: gradient must land entirely on index 1.
    Tensor x = Tensor::from_vector(Shape(1, 1, 1, 4), {1, 3, 3, 2});
    x.set_requires_grad(true);
    Tape tape;
    Tensor out = adaptive_max_pool(tape, x, 1, 1);
    tape.backward(out);
    EXPECT_FLOAT_EQ(x.grad()[0], 0.0f);
    EXPECT_FLOAT_EQ(x.grad()[1], 1.0f);
    EXPECT_FLOAT_EQ(x.grad()[2], 0.0f);
    EXPECT_FLOAT_EQ(x.grad()[3], 0.0f);
}
