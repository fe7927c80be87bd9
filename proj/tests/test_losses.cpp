#include <gtest/gtest.h>

#include <cmath>

#include "advprune/diffcore.hpp"
#include "advprune/losses.hpp"
#include "advprune/models.hpp"
#include "test_util.hpp"

using namespace advprune;

namespace {

Tensor random_logits(std::size_t n, std::size_t k, std::uint64_t seed, double scale = 3.0) {
    return testutil::random_tensor({n, k}, seed, -scale, scale);
}

LossConfig trades_cfg(double beta) { return {LossKind::trades, beta, 6.0}; }
LossConfig mart_cfg(double lambda) { return {LossKind::mart, 1.0, lambda}; }

// Finite differences of a logit-level loss in double precision.
template <class F>
std::vector<double> logit_fd(const Tensor& logits, F&& f, double h = 1e-6) {
    auto z = logits.cast<double>();
    std::vector<double> g(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double orig = z.values[i];
        z.values[i] = orig + h;
        const double up = f(z);
        z.values[i] = orig - h;
        const double down = f(z);
        z.values[i] = orig;
        g[i] = (up - down) / (2 * h);
    }
    return g;
}

} // namespace

TEST(CrossEntropy, UniformLogits) {
    const Tensor z({3, 10}, 0.0f);
    const std::vector<int> y{0, 4, 9};
    EXPECT_NEAR(cross_entropy(z, std::span<const int>(y)).value, std::log(10.0), 1e-6);
}

TEST(CrossEntropy, HugeMarginIsNearZero) {
    const Tensor z({1, 3}, {1000.f, 0.f, 0.f});
    const std::vector<int> y{0};
    EXPECT_NEAR(cross_entropy(z, std::span<const int>(y)).value, 0.0, 1e-6);
}

TEST(CrossEntropy, HandValue) {
    const Tensor z({1, 3}, {2.f, 1.f, 0.f});
    const std::vector<int> y{0};
    const double expected = -std::log(std::exp(2.0) / (std::exp(2.0) + std::exp(1.0) + 1.0));
    EXPECT_NEAR(expected, 0.40761, 1e-5);
    EXPECT_NEAR(cross_entropy(z, std::span<const int>(y)).value, expected, 1e-6);
}

TEST(CrossEntropy, LabelOutOfRange) {
    const Tensor z({1, 3}, 0.0f);
    const std::vector<int> y{3};
    EXPECT_THROW(cross_entropy(z, std::span<const int>(y)), InvalidArgument);
}

TEST(KlDivergence, IdenticalIsZero) {
    const auto z = random_logits(4, 5, 1);
    EXPECT_NEAR(kl_divergence(z, z).value, 0.0, 1e-7);
}

TEST(KlDivergence, NonNegativeOnRandomPairs) {
    for (std::uint64_t s = 0; s < 1000; ++s) {
        const auto p = random_logits(1, 4, 2 * s + 100), q = random_logits(1, 4, 2 * s + 101);
        EXPECT_GE(kl_divergence(p, q).value, 0.0f);
    }
}

TEST(KlDivergence, HandValue) {
    // p uniform over two classes, q = softmax([ln 3, 0]) = [3/4, 1/4].
    const Tensor p({1, 2}, {0.f, 0.f});
    const Tensor q({1, 2}, {static_cast<float>(std::log(3.0)), 0.f});
    const double expected = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
    EXPECT_NEAR(kl_divergence(p, q).value, expected, 1e-6);
}

TEST(KlDivergence, ShapeMismatch) {
    EXPECT_THROW(kl_divergence(random_logits(2, 3, 1), random_logits(2, 4, 2)), ShapeError);
}

TEST(Trades, ReducesToCrossEntropy) {
    const auto clean = random_logits(5, 4, 3), adv = random_logits(5, 4, 4);
    const auto y = testutil::random_labels(5, 4, 5);
    const auto ce = cross_entropy(clean, std::span<const int>(y)).value;
    EXPECT_NEAR(trades_loss(clean, clean, std::span<const int>(y), trades_cfg(1.0)).value, ce, 1e-6);
    EXPECT_NEAR(trades_loss(clean, adv, std::span<const int>(y), trades_cfg(0.0)).value, ce, 1e-6);
}

TEST(Trades, SumOfIndependentTerms) {
    const auto clean = random_logits(5, 4, 6), adv = random_logits(5, 4, 7);
    const auto y = testutil::random_labels(5, 4, 8);
    const double ce = cross_entropy(clean, std::span<const int>(y)).value;
    const double kl = kl_divergence(clean, adv).value;
    EXPECT_NEAR(trades_loss(clean, adv, std::span<const int>(y), trades_cfg(1.0)).value, ce + kl, 1e-5);
    EXPECT_GE(trades_loss(clean, adv, std::span<const int>(y), trades_cfg(2.0)).value, ce);
}

TEST(Mart, BoostedTermHandValue) {
    // p_adv = [0.8, 0.2]: logits [ln 4, 0].
    const Tensor adv({1, 2}, {static_cast<float>(std::log(4.0)), 0.f});
    const std::vector<int> y{0};
    const double expected = -2.0 * std::log(0.8);
    EXPECT_NEAR(expected, 0.44629, 1e-5);
    EXPECT_NEAR(mart_loss(adv, adv, std::span<const int>(y), mart_cfg(0.0)).value, expected, 1e-6);
    const auto clean = random_logits(1, 2, 9);
    EXPECT_NEAR(mart_loss(clean, adv, std::span<const int>(y), mart_cfg(0.0)).value, expected, 1e-6);
}

TEST(Mart, ConfidentCleanRowsSilenceRegularizer) {
    const Tensor clean({2, 3}, {60.f, 0.f, 0.f, 0.f, 0.f, 60.f});
    const auto adv = random_logits(2, 3, 10);
    const std::vector<int> y{0, 2};
    const double base = mart_loss(clean, adv, std::span<const int>(y), mart_cfg(0.0)).value;
    EXPECT_NEAR(mart_loss(clean, adv, std::span<const int>(y), mart_cfg(50.0)).value, base, 1e-6);
}

TEST(Mart, ClampKeepsConfidentWrongAdversaryFinite) {
    const Tensor adv({1, 2}, {0.f, 80.f});
    const std::vector<int> y{0};
    const auto r = mart_loss(adv, adv, std::span<const int>(y), mart_cfg(1.0));
    EXPECT_TRUE(std::isfinite(r.value));
    EXPECT_NEAR(r.value, 80.0 - std::log(1e-8), 1e-3);
}

TEST(Losses, LogitGradientsMatchFiniteDifferences) {
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto a = random_logits(3, 4, 10 * s + 1), b = random_logits(3, 4, 10 * s + 2);
        const auto y = testutil::random_labels(3, 4, 10 * s + 3);
        const auto ys = std::span<const int>(y);
        const auto bd = b.cast<double>(), ad = a.cast<double>();

        const auto ce = cross_entropy(a, ys);
        EXPECT_LE(testutil::worst_relative_error(ce.logit_grads[0].values,
                                                 logit_fd(a, [&](const auto& z) { return cross_entropy(z, ys).value; })),
                  1e-4);

        const auto kl = kl_divergence(a, b);
        EXPECT_LE(testutil::worst_relative_error(kl.logit_grads[0].values,
                                                 logit_fd(a, [&](const auto& z) { return kl_divergence(z, bd).value; })),
                  1e-4);
        EXPECT_LE(testutil::worst_relative_error(kl.logit_grads[1].values,
                                                 logit_fd(b, [&](const auto& z) { return kl_divergence(ad, z).value; })),
                  1e-4);

        const auto mc = mart_cfg(3.0);
        const auto m = mart_loss(a, b, ys, mc);
        EXPECT_LE(testutil::worst_relative_error(m.logit_grads[0].values,
                                                 logit_fd(a, [&](const auto& z) { return mart_loss(z, bd, ys, mc).value; })),
                  1e-4);
        EXPECT_LE(testutil::worst_relative_error(m.logit_grads[1].values,
                                                 logit_fd(b, [&](const auto& z) { return mart_loss(ad, z, ys, mc).value; })),
                  1e-4);
    }
}

TEST(Losses, ShiftInvariance) {
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto a = random_logits(4, 3, 3 * s + 1), b = random_logits(4, 3, 3 * s + 2);
        const auto y = testutil::random_labels(4, 3, 3 * s + 3);
        const auto ys = std::span<const int>(y);
        Tensor a2 = a, b2 = b;
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t c = 0; c < 3; ++c) {
                a2.values[i * 3 + c] += static_cast<float>(i) + 0.5f;
                b2.values[i * 3 + c] -= 2.0f * static_cast<float>(i) + 0.25f;
            }
        EXPECT_NEAR(cross_entropy(a, ys).value, cross_entropy(a2, ys).value, 1e-5);
        EXPECT_NEAR(kl_divergence(a, b).value, kl_divergence(a2, b2).value, 1e-5);
        EXPECT_NEAR(trades_loss(a, b, ys, trades_cfg(1.0)).value, trades_loss(a2, b2, ys, trades_cfg(1.0)).value, 1e-5);
        EXPECT_NEAR(mart_loss(a, b, ys, mart_cfg(2.0)).value, mart_loss(a2, b2, ys, mart_cfg(2.0)).value, 1e-5);
    }
}

TEST(Losses, WeightedMeanIsInvariantToSplittingAnExample) {
    const auto a = random_logits(3, 4, 31), b = random_logits(3, 4, 32);
    const std::vector<int> y{1, 3, 0};
    const std::vector<float> w{0.5f, 2.0f, 1.0f};
    // duplicate row 1, halving its weight
    Tensor a2({4, 4}), b2({4, 4});
    const std::size_t order[] = {0, 1, 1, 2};
    a2 = gather_rows(a, std::span<const std::size_t>(order));
    b2 = gather_rows(b, std::span<const std::size_t>(order));
    const std::vector<int> y2{1, 3, 3, 0};
    const std::vector<float> w2{0.5f, 1.0f, 1.0f, 1.0f};
    const auto cfg_t = trades_cfg(1.5);
    const auto cfg_m = mart_cfg(2.0);
    EXPECT_NEAR(cross_entropy(a, std::span<const int>(y), std::span<const float>(w)).value,
                cross_entropy(a2, std::span<const int>(y2), std::span<const float>(w2)).value, 1e-6);
    EXPECT_NEAR(trades_loss(a, b, std::span<const int>(y), cfg_t, std::span<const float>(w)).value,
                trades_loss(a2, b2, std::span<const int>(y2), cfg_t, std::span<const float>(w2)).value, 1e-6);
    EXPECT_NEAR(mart_loss(a, b, std::span<const int>(y), cfg_m, std::span<const float>(w)).value,
                mart_loss(a2, b2, std::span<const int>(y2), cfg_m, std::span<const float>(w2)).value, 1e-6);
}

TEST(Losses, NegativeWeightsRejected) {
    const auto a = random_logits(2, 2, 1);
    const std::vector<int> y{0, 1};
    const std::vector<float> w{1.0f, -1.0f};
    EXPECT_THROW(cross_entropy(a, std::span<const int>(y), std::span<const float>(w)), InvalidArgument);
}

TEST(Losses, FullNetworkGradientsForEveryObjective) {
    const auto spec = ModelSpec::mlp(2, 3, {8});
    const LossConfig trades = trades_cfg(1.0), mart = mart_cfg(2.0);
    const std::vector<std::pair<Objective<float>, Objective<double>>> objectives{
        {ce_objective<float>(), ce_objective<double>()},
        {kl_objective<float>(), kl_objective<double>()},
        {trades_objective<float>(trades), trades_objective<double>(trades)},
        {mart_objective<float>(mart), mart_objective<double>(mart)},
    };
    for (const auto& [of, od] : objectives) {
        const auto params = init_model(spec, 77);
        const auto clean = testutil::random_tensor({4, 2}, 78);
        const auto adv = testutil::random_tensor({4, 2}, 79);
        const auto y = testutil::random_labels(4, 3, 80);
        const auto an = evaluate_with_gradients(params, spec, Batch<float>{adv, y, {}, &clean}, of);
        const auto cd = clean.cast<double>();
        const auto fd = finite_difference_gradient(params.cast<double>(), spec,
                                                   Batch<double>{adv.cast<double>(), y, {}, &cd}, od, 1e-5);
        for (std::size_t p = 0; p < params.size(); ++p)
            EXPECT_LE(testutil::worst_relative_error(an.param_grads[p].values, fd.param_grads[p].values), 1e-4)
                << of.name << " " << params[p].name;
    }
}
