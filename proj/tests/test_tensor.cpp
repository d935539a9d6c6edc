#include <gtest/gtest.h>

#include "oracles.hpp"
#include "paradis/autodiff.hpp"

using namespace paradis;

TEST(Tensor, SizeMatchesShape) {
    Tensor<float> t(Shape{2, 3, 4});
    EXPECT_EQ(t.size(), 24u);
    EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>(3)), ShapeError);
}

TEST(Tensor, SliceAndScatterAreInverse) {
    std::mt19937_64 rng(1);
    auto t = oracle::random_tensor<double>({4, 5, 3}, rng);
    const std::vector<Range> r{{1, 3}, {2, 5}, {0, 3}};
    auto s = slice(t, r);
    ASSERT_EQ(s.shape(), (Shape{2, 3, 3}));
    for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 3; ++b)
            for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(s[(a * 3 + b) * 3 + c], t[((a + 1) * 5 + b + 2) * 3 + c]);
    Tensor<double> z(t.shape());
    scatter_add(z, r, s);
    scatter_add(z, r, s);
    for (std::size_t a = 0; a < 2; ++a) EXPECT_EQ(z[((a + 1) * 5 + 2) * 3], 2 * t[((a + 1) * 5 + 2) * 3]);
    EXPECT_EQ(z[0], 0.0);
}

TEST(Tensor, SliceOutOfRangeThrows) {
    Tensor<float> t(Shape{2, 2});
    EXPECT_THROW(slice(t, {Range{0, 3}, Range{0, 2}}), ShapeError);
    EXPECT_THROW(slice(t, {Range{0, 1}}), ShapeError);
}

TEST(Tensor, CastAndFinite) {
    Tensor<double> t(Shape{3}, std::vector<double>{1.5, -2, 0});
    auto f = t.cast<float>();
    EXPECT_EQ(f[0], 1.5f);
    EXPECT_TRUE(f.all_finite());
    f[2] = std::numeric_limits<float>::infinity();
    EXPECT_FALSE(f.all_finite());
}

TEST(Conv2d, OnesKernelSumsWindow) {
    Graph<float> g(false);
    Tensor<float> x(Shape{1, 1, 3, 3}, 1.f), w(Shape{1, 1, 3, 3}, 1.f);
    auto y = ops::conv2d<float>(g.constant(x), g.constant(w), std::nullopt, {1, 0, 1}).value();
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_EQ(y[0], 9.f);
}

TEST(Conv2d, IdentityKernel) {
    std::mt19937_64 rng(2);
    auto x = oracle::random_tensor<float>({2, 1, 4, 5}, rng);
    Graph<float> g(false);
    auto y = ops::conv2d<float>(g.constant(x), g.constant(Tensor<float>(Shape{1, 1, 1, 1}, 1.f)), std::nullopt, {1, 0, 1}).value();
    EXPECT_EQ(y, x);
}

TEST(Conv2d, RandomMatchesDirectLoopAtOrigin) {
    std::mt19937_64 rng(3);
    auto x = oracle::random_tensor<float>({2, 3, 5, 5}, rng);
    auto w = oracle::random_tensor<float>({4, 3, 3, 3}, rng);
    Graph<float> g(false);
    auto y = ops::conv2d<float>(g.constant(x), g.constant(w), std::nullopt, {1, 0, 1}).value();
    auto ref = oracle::conv2d(x, w, 1, 0, 1);
    EXPECT_NEAR(y.at(0, 0, 0, 0), ref.at(0, 0, 0, 0), 1e-6);
    EXPECT_LT(max_abs_diff(y, ref), 1e-5);
}

TEST(Backward, SumGivesOnes) {
    Graph<double> g;
    auto w = g.input(Tensor<double>(Shape{3}, std::vector<double>{1, 2, 3}));
    g.backward(ops::sum(w));
    EXPECT_EQ(g.grad(w), Tensor<double>(Shape{3}, 1.0));
}

TEST(Backward, HalfSquaredNorm) {
    Graph<double> g;
    auto w = g.input(Tensor<double>(Shape{3}, std::vector<double>{1, 2, 3}));
    g.backward(ops::scale(ops::sum(ops::square(w)), 0.5));
    EXPECT_EQ(g.grad(w), Tensor<double>(Shape{3}, std::vector<double>{1, 2, 3}));
}

TEST(BatchNorm, StoredUnitStatsIsIdentity) {
    std::mt19937_64 rng(4);
    auto x = oracle::random_tensor<double>({2, 3, 2, 2}, rng);
    std::vector<double> mean(3, 0.0), var(3, 1.0);
    ops::BatchNormArgs<double> args;
    args.eps = 0;
    args.stored_mean = &mean;
    args.stored_var = &var;
    Graph<double> g(false);
    auto y = ops::batchnorm(g.constant(x), g.constant(Tensor<double>(Shape{3}, 1.0)), g.constant(Tensor<double>(Shape{3})), args);
    EXPECT_EQ(y.value(), x);
}
