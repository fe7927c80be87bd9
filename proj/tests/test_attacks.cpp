#include <gtest/gtest.h>

#include <cmath>

#include "advprune/attacks.hpp"
#include "test_util.hpp"

using namespace advprune;

namespace {

// Few steps of plain SGD on CE so attack tests see a non-trivial boundary.
ParamSet quick_train(const ModelSpec& spec, const Dataset& data, int steps, std::uint64_t seed) {
    auto params = init_model(spec, seed);
    const auto obj = ce_objective<float>();
    for (int s = 0; s < steps; ++s) {
        const auto rec = evaluate_with_gradients(params, spec, Batch<float>{data.inputs, data.labels}, obj);
        for (std::size_t p = 0; p < params.size(); ++p)
            for (std::size_t i = 0; i < params[p].tensor.size(); ++i)
                params[p].tensor.values[i] -= 0.5f * rec.param_grads[p].values[i];
    }
    return params;
}

double mean_loss(const ParamSet& params, const ModelSpec& spec, const Tensor& x, const std::vector<int>& y) {
    return evaluate_loss(params, spec, Batch<float>{x, y}, ce_objective<float>()).value;
}

} // namespace

TEST(Project, ClampCases) {
    AttackSpec a{0.1, 0.01, 1, 1, false};
    EXPECT_NEAR(project_linf(Tensor({1}, {0.5f}), Tensor({1}, {0.9f}), a).values[0], 0.6f, 1e-7);
    EXPECT_EQ(project_linf(Tensor({1}, {0.0f}), Tensor({1}, {-0.3f}), a).values[0], 0.0f);
    const Tensor clean({3}, {0.2f, 0.5f, 0.8f}), inside({3}, {0.25f, 0.45f, 0.8f});
    EXPECT_EQ(project_linf(clean, inside, a), inside);
    EXPECT_THROW(project_linf(clean, Tensor({2}), a), ShapeError);
}

TEST(AttackSpec, Validation) {
    EXPECT_THROW((AttackSpec{-0.1, 0.1, 1, 1, false}.validate()), InvalidArgument);
    EXPECT_THROW((AttackSpec{0.1, 0.0, 1, 1, false}.validate()), InvalidArgument);
    EXPECT_NO_THROW((AttackSpec{0.1, 0.0, 0, 1, false}.validate()));
    EXPECT_THROW((AttackSpec{0.1, 0.1, 1, 0, false}.validate()), InvalidArgument);
}

TEST(Pgd, QuadraticHandTrace) {
    // L(u) = (u − 0.8)², ascent from 0.5 with ε = 0.2, α = 0.1.
    const Tensor u0({1, 1}, {0.5f});
    AttackSpec a{0.2, 0.1, 3, 1, false};
    InputGradientFn<float> grad = [](const Tensor& u) {
        const float d = u.values[0] - 0.8f;
        return InputGradient<float>{{d * d}, Tensor({1, 1}, {2.0f * d})};
    };
    std::vector<float> trace;
    Rng rng(0);
    const auto adv = pgd_ascent<float>(u0, a, grad, rng, [&](const Tensor& x) { trace.push_back(x.values[0]); });
    ASSERT_EQ(trace.size(), 3u);
    EXPECT_FLOAT_EQ(trace[0], 0.4f);
    EXPECT_FLOAT_EQ(trace[1], 0.3f);
    EXPECT_FLOAT_EQ(trace[2], 0.3f);
    EXPECT_FLOAT_EQ(adv.values[0], 0.3f);
    const float d = adv.values[0] - 0.8f;
    EXPECT_NEAR(d * d, 0.25f, 1e-6);
}

TEST(Pgd, ZeroStepsOrZeroEpsilonReturnsInput) {
    const auto spec = ModelSpec::mlp(2, 2, {8});
    const auto params = init_model(spec, 1);
    const auto x = testutil::random_tensor({10, 2}, 2);
    const auto y = testutil::random_labels(10, 2, 3);
    EXPECT_EQ(pgd_attack(params, spec, x, y, ce_objective<float>(), AttackSpec{0.1, 0.02, 0, 1, false}, 4), x);
    EXPECT_EQ(pgd_attack(params, spec, x, y, ce_objective<float>(), AttackSpec{0.0, 0.02, 20, 3, true}, 4), x);
}

TEST(Pgd, OutputsStayInBallAndBox) {
    const auto spec = ModelSpec::mlp(2, 3, {16});
    for (std::uint64_t s = 0; s < 30; ++s) {
        const auto params = init_model(spec, s);
        const auto x = testutil::random_tensor({8, 2}, 100 + s);
        const auto y = testutil::random_labels(8, 3, 200 + s);
        Rng rng(s);
        AttackSpec a{rng.uniform(0.0, 0.3), rng.uniform(0.01, 0.2), static_cast<int>(rng.below(8)),
                     1 + static_cast<int>(rng.below(3)), rng.below(2) == 1};
        for (const auto& adv : {pgd_attack(params, spec, x, y, ce_objective<float>(), a, s),
                                fgsm_perturb(params, spec, x, y, ce_objective<float>(), a)}) {
            for (std::size_t i = 0; i < x.size(); ++i) {
                EXPECT_LE(std::abs(adv.values[i] - x.values[i]), a.epsilon + 1e-6);
                EXPECT_GE(adv.values[i], 0.0f);
                EXPECT_LE(adv.values[i], 1.0f);
            }
        }
    }
}

TEST(Pgd, DeterministicGivenSeed) {
    const auto spec = ModelSpec::mlp(2, 2, {8});
    const auto params = init_model(spec, 1);
    const auto x = testutil::random_tensor({6, 2}, 2);
    const auto y = testutil::random_labels(6, 2, 3);
    const AttackSpec a{0.1, 0.02, 5, 2, true};
    EXPECT_EQ(pgd_attack(params, spec, x, y, ce_objective<float>(), a, 9),
              pgd_attack(params, spec, x, y, ce_objective<float>(), a, 9));
}

TEST(Fgsm, ZeroGradientLeavesInput) {
    const auto spec = ModelSpec::mlp(2, 2, {});
    auto params = init_model(spec, 1);
    for (auto& p : params) std::fill(p.tensor.values.begin(), p.tensor.values.end(), 0.0f);
    const auto x = testutil::random_tensor({4, 2}, 2);
    const std::vector<int> y{0, 1, 0, 1};
    EXPECT_EQ(fgsm_perturb(params, spec, x, y, ce_objective<float>(), AttackSpec{0.1, 0.1, 1, 1, false}), x);
}

TEST(Fgsm, LogisticSignStep) {
    // logits [0, w·u]: for label 0 the loss grows with u when w > 0.
    const auto spec = ModelSpec::mlp(1, 2, {});
    ParamSet params;
    params.add("fc1.weight", Tensor({2, 1}, {0.0f, 2.0f}));
    params.add("fc1.bias", Tensor({2}, {0.0f, 0.0f}));
    const Tensor x({1, 1}, {0.5f});
    const std::vector<int> y{0};
    const auto adv = fgsm_perturb(params, spec, x, y, ce_objective<float>(), AttackSpec{0.1, 0.1, 1, 1, false});
    EXPECT_NEAR(adv.values[0], 0.6f, 1e-7);
}

TEST(Fgsm, IncreasesLossOnMostBatches) {
    const auto spec = ModelSpec::mlp(2, 2, {16});
    int increased = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto params = init_model(spec, 1000 + s);
        const auto x = testutil::random_tensor({16, 2}, 2000 + s, 0.2, 0.8);
        const auto y = testutil::random_labels(16, 2, 3000 + s);
        const auto adv = fgsm_perturb(params, spec, x, y, ce_objective<float>(), AttackSpec{0.05, 0.05, 1, 1, false});
        if (mean_loss(params, spec, adv, y) >= mean_loss(params, spec, x, y)) ++increased;
    }
    EXPECT_GE(increased, 90);
}

TEST(Pgd, MoreStepsDoNotWeakenTheAttack) {
    const auto spec = ModelSpec::mlp(2, 2, {32});
    const auto data = testutil::blobs(128, 0.12, 5);
    const auto params = quick_train(spec, data, 200, 6);
    double prev = -1e9;
    for (int k = 0; k <= 10; ++k) {
        const AttackSpec a{0.08, 0.02, k, 1, false};
        const auto adv = pgd_attack(params, spec, data.inputs, data.labels, ce_objective<float>(), a, 7);
        const double loss = mean_loss(params, spec, adv, data.labels);
        EXPECT_GE(loss, prev - 1e-3) << "k=" << k;
        prev = loss;
    }
}

TEST(Robustness, ZeroEpsilonEqualsClean) {
    const auto spec = ModelSpec::mlp(2, 2, {16});
    const auto data = testutil::blobs(200, 0.15, 1);
    const auto params = quick_train(spec, data, 50, 2);
    const AttackSpec attacks[] = {{0.0, 2.0 / 255, 50, 3, true}};
    const auto rep = evaluate_robust_accuracy(params, spec, data, attacks, 3);
    EXPECT_DOUBLE_EQ(rep.rows[0].robust_acc, rep.clean_acc);
}

TEST(Robustness, EmptyDatasetRejected) {
    const auto spec = ModelSpec::mlp(2, 2, {4});
    Dataset empty;
    empty.inputs = Tensor({0, 2});
    const AttackSpec attacks[] = {AttackSpec::evaluation(0.1)};
    EXPECT_THROW(evaluate_robust_accuracy(init_model(spec, 1), spec, empty, attacks, 0), InvalidArgument);
}

TEST(Robustness, UntrainedModelIsAtChance) {
    const auto spec = ModelSpec::mlp(2, 4, {32});
    Dataset data;
    data.classes = 4;
    data.inputs = testutil::random_tensor({1000, 2}, 9);
    data.labels = testutil::random_labels(1000, 4, 10);
    const auto rep = evaluate_robust_accuracy(init_model(spec, 11), spec, data, {}, 0);
    EXPECT_NEAR(rep.clean_acc, 0.25, 0.05);
}

TEST(Robustness, WorstCaseOverRestarts) {
    // Restarts that each fool a subset of examples: the restart union must be
    // counted, so more restarts can only lower robust accuracy.
    const auto spec = ModelSpec::mlp(2, 2, {32});
    const auto data = testutil::blobs(300, 0.18, 3);
    const auto params = quick_train(spec, data, 100, 4);
    const AttackSpec one[] = {{0.08, 0.02, 3, 1, true}};
    const AttackSpec many[] = {{0.08, 0.02, 3, 6, true}};
    const auto r1 = evaluate_robust_accuracy(params, spec, data, one, 5);
    const auto r6 = evaluate_robust_accuracy(params, spec, data, many, 5);
    EXPECT_LE(r6.rows[0].robust_acc, r1.rows[0].robust_acc);
}

TEST(Robustness, DeterministicAndMonotoneInEpsilon) {
    const auto spec = ModelSpec::mlp(2, 2, {32});
    const auto data = testutil::blobs(300, 0.15, 7);
    const auto params = quick_train(spec, data, 100, 8);
    std::vector<AttackSpec> attacks;
    for (double eps : {0.02, 0.05, 0.1, 0.2}) attacks.push_back({eps, eps / 4, 10, 2, true});
    const auto a = evaluate_robust_accuracy(params, spec, data, attacks, 1);
    const auto b = evaluate_robust_accuracy(params, spec, data, attacks, 1);
    for (std::size_t i = 0; i < attacks.size(); ++i) EXPECT_EQ(a.rows[i].robust_acc, b.rows[i].robust_acc);
    for (std::size_t i = 1; i < attacks.size(); ++i) EXPECT_LE(a.rows[i].robust_acc, a.rows[i - 1].robust_acc);
}

TEST(Robustness, CsvColumns) {
    RobustnessReport rep;
    rep.rows.push_back({0.5, 0.9, 0.7, 10, 1.25});
    std::ostringstream out;
    rep.write_csv(out);
    EXPECT_EQ(out.str(), "epsilon,clean_acc,robust_acc,examples,seconds\n0.5,0.9,0.7,10,1.25\n");
}
