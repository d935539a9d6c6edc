#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "paradis/losses.hpp"

using namespace paradis;

namespace {

template <typename T>
Tensor<T> random_prediction(std::size_t B, std::size_t C, std::mt19937_64& rng) {
    Tensor<T> logits = oracle::random_tensor<T>({B, C}, rng, -3, 3);
    Tensor<T> p(Shape{B, C});
    for (std::size_t b = 0; b < B; ++b) {
        long double z = 0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(static_cast<long double>(logits.at(b, c)));
        for (std::size_t c = 0; c < C; ++c) p.at(b, c) = static_cast<T>(std::exp(static_cast<long double>(logits.at(b, c))) / z);
    }
    return p;
}

template <typename T>
T scalar(Var<T> v) {
    return v.value()[0];
}

}  // namespace

TEST(CrossEntropy, UniformBinaryPrediction) {
    Graph<double> g;
    auto pred = g.input(Tensor<double>(Shape{1, 2}, std::vector<double>{0.5, 0.5}));
    auto target = g.constant(Tensor<double>(Shape{1, 2}, std::vector<double>{1, 0}));
    EXPECT_NEAR(scalar(ce_loss(pred, target)), 0.5 * std::log(2.0), 1e-12);
    EXPECT_NEAR(0.5 * std::log(2.0), 0.3466, 1e-4);
}

TEST(CrossEntropy, PerfectPredictionIsZero) {
    Graph<double> g;
    const auto t = one_hot<double>({2, 0}, 3);
    EXPECT_EQ(scalar(ce_loss(g.input(t), g.constant(t))), 0.0);
}

TEST(CrossEntropy, DecreasesAsTargetProbabilityRises) {
    double prev = INFINITY;
    for (double q : {0.1, 0.3, 0.5, 0.7, 0.9, 0.99}) {
        Graph<double> g;
        auto pred = g.input(Tensor<double>(Shape{1, 2}, std::vector<double>{q, 1 - q}));
        const double l = scalar(ce_loss(pred, g.constant(one_hot<double>({0}, 2))));
        EXPECT_LT(l, prev) << q;
        prev = l;
    }
}

TEST(CrossEntropy, BatchMeanOfRows) {
    std::mt19937_64 rng(3);
    const auto p = random_prediction<double>(4, 5, rng);
    const auto t = one_hot<double>({0, 4, 2, 2}, 5);
    long double ref = 0;
    for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t c = 0; c < 5; ++c) ref -= t.at(b, c) * std::log(static_cast<long double>(p.at(b, c))) / 5;
    ref /= 4;
    Graph<double> g;
    EXPECT_NEAR(scalar(ce_loss(g.input(p), g.constant(t))), static_cast<double>(ref), 1e-12);
}

TEST(CrossEntropy, LabelOutsideClassesThrows) {
    EXPECT_THROW(one_hot<float>({3}, 3), ShapeError);
    EXPECT_THROW(one_hot<float>({-1}, 3), ShapeError);
}

TEST(Distillation, KdEqualsCeAgainstTeacherBitwise) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto s = random_prediction<float>(3, 10, rng);
        const auto t = random_prediction<float>(3, 10, rng);
        Graph<float> g1, g2, g3;
        const float kd = scalar(kd_loss(g1.input(s), g1.input(t)));
        const float kd_const = scalar(kd_loss(g2.input(s), t));
        const float ce = scalar(ce_loss(g3.input(s), g3.constant(t)));
        EXPECT_EQ(kd, ce);
        EXPECT_EQ(kd_const, ce);
    }
}

TEST(Distillation, KdActWithZeroBetaEqualsKdBitwise) {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const auto s = random_prediction<float>(2, 10, rng);
        const auto t = random_prediction<float>(2, 10, rng);
        const auto sa = oracle::random_tensor<float>({2, 16}, rng);
        const auto ta = oracle::random_tensor<float>({2, 16}, rng);
        Graph<float> g1, g2;
        const float with_act = scalar(kd_act_loss(g1.input(s), g1.input(t), g1.input(sa), g1.input(ta), 0.f));
        const float kd = scalar(kd_loss(g2.input(s), g2.input(t)));
        EXPECT_EQ(with_act, kd);
    }
}

TEST(Distillation, KdActGradientMatchesKdWhenBetaIsZero) {
    std::mt19937_64 rng(13);
    const auto s = random_prediction<double>(2, 6, rng);
    const auto t = random_prediction<double>(2, 6, rng);
    const auto sa = oracle::random_tensor<double>({2, 8}, rng);
    const auto ta = oracle::random_tensor<double>({2, 8}, rng);
    Graph<double> g1, g2;
    auto s1 = g1.input(s);
    auto sa1 = g1.input(sa);
    g1.backward(kd_act_loss(s1, g1.input(t), sa1, g1.input(ta), 0.0));
    auto s2 = g2.input(s);
    g2.backward(kd_loss(s2, g2.input(t)));
    EXPECT_EQ(g1.grad(s1), g2.grad(s2));
    for (std::size_t i = 0; i < g1.grad(sa1).size(); ++i) EXPECT_EQ(g1.grad(sa1)[i], 0.0);
}

TEST(Distillation, TeacherReceivesNoGradient) {
    std::mt19937_64 rng(14);
    const auto s = random_prediction<double>(3, 5, rng);
    const auto t = random_prediction<double>(3, 5, rng);
    const auto sa = oracle::random_tensor<double>({3, 7}, rng);
    const auto ta = oracle::random_tensor<double>({3, 7}, rng);
    Graph<double> g;
    auto sv = g.input(s), tv = g.input(t), sav = g.input(sa), tav = g.input(ta);
    auto total = ops::add(kd_loss(sv, tv), kd_act_loss(sv, tv, sav, tav, 2.0));
    g.backward(total);
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(g.grad(tv)[i], 0.0);
    for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(g.grad(tav)[i], 0.0);
    double student_mass = 0;
    for (std::size_t i = 0; i < s.size(); ++i) student_mass += std::abs(g.grad(sv)[i]);
    EXPECT_GT(student_mass, 0.0);
}

TEST(Distillation, UnitActivationGapHandCase) {
    Graph<double> g;
    const auto pred = one_hot<double>({1}, 3);
    auto s = g.input(pred);
    auto t = g.input(pred);
    auto sa = g.input(Tensor<double>(Shape{1, 4}));
    auto ta = g.input(Tensor<double>(Shape{1, 4}, std::vector<double>{1, 1, 1, 1}));
    EXPECT_EQ(scalar(kd_act_loss(s, t, sa, ta, 1.0)), 1.0);
}

TEST(Distillation, ActivationTermScalesWithBeta) {
    std::mt19937_64 rng(15);
    const auto s = random_prediction<double>(2, 4, rng);
    const auto t = random_prediction<double>(2, 4, rng);
    const auto sa = oracle::random_tensor<double>({2, 6}, rng);
    const auto ta = oracle::random_tensor<double>({2, 6}, rng);
    long double mse = 0;
    for (std::size_t i = 0; i < sa.size(); ++i) mse += std::pow(static_cast<long double>(sa[i]) - ta[i], 2);
    mse /= sa.size();
    Graph<double> g0;
    const double kd = scalar(kd_loss(g0.input(s), g0.input(t)));
    for (double beta : {0.5, 1.0, 3.0}) {
        Graph<double> g;
        const double l = scalar(kd_act_loss(g.input(s), g.input(t), g.input(sa), g.input(ta), beta));
        EXPECT_NEAR(l, kd + beta * static_cast<double>(mse), 1e-12) << beta;
    }
}

TEST(Distillation, MismatchedActivationWidthThrows) {
    Graph<float> g;
    const auto p = one_hot<float>({0}, 2);
    EXPECT_THROW(kd_act_loss(g.input(p), g.input(p), g.input(Tensor<float>(Shape{1, 4})), g.input(Tensor<float>(Shape{1, 5})), 1.f),
                 ShapeError);
}

TEST(Predictions, ValidityCheck) {
    std::mt19937_64 rng(16);
    EXPECT_TRUE(is_prediction(random_prediction<float>(3, 10, rng)));
    EXPECT_FALSE(is_prediction(Tensor<float>(Shape{2, 3})));
    EXPECT_FALSE(is_prediction(Tensor<float>(Shape{2, 2}, std::vector<float>{1.5f, -0.5f, 0.5f, 0.5f})));
}
