#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "advprune/diffcore.hpp"
#include "advprune/losses.hpp"
#include "advprune/models.hpp"
#include "test_util.hpp"

using namespace advprune;

namespace {

// Single-parameter "model": logits row = [θ·x, 0].
struct DotArch {
    std::size_t features = 1;
    std::size_t class_count() const { return 2; }
    template <class T>
    void check_params(const BasicParamSet<T>& p) const {
        if (p.size() != 1 || p[0].tensor.shape != Shape{1, features}) throw ShapeError("theta", "bad");
    }
    void check_inputs(const Shape& s) const {
        if (s.size() != 2 || s[1] != features) throw ShapeError("inputs", "bad");
    }
    template <class T>
    Var forward(Tape<T>& tape, std::span<const Var> p, Var x) const {
        auto z = tape.matmul_nt(x, p[0]);  // [B,1]
        // append a zero column so the logits are [B,2]
        BasicTensor<T> w2({2, 1}, std::vector<T>{T{1}, T{0}});
        return tape.matmul_nt(z, tape.input(w2, false));
    }
};

template <class T>
Objective<T> first_logit_mean() {
    return {"first", 1, [](std::span<const BasicTensor<T>> z, std::span<const int>, std::span<const T>) {
                LossResult<T> r;
                const std::size_t n = z[0].dim(0);
                r.logit_grads.emplace_back(z[0].shape);
                for (std::size_t i = 0; i < n; ++i) {
                    r.value += z[0].values[2 * i] / static_cast<T>(n);
                    r.row_values.push_back(z[0].values[2 * i]);
                    r.logit_grads[0].values[2 * i] = T{1} / static_cast<T>(n);
                }
                return r;
            }};
}

template <class T>
Objective<T> first_logit_squared() {
    return {"square", 1, [](std::span<const BasicTensor<T>> z, std::span<const int>, std::span<const T>) {
                LossResult<T> r;
                const T u = z[0].values[0];
                r.value = u * u;
                r.row_values = {r.value};
                r.logit_grads.emplace_back(z[0].shape);
                r.logit_grads[0].values[0] = T{2} * u;
                return r;
            }};
}

template <class T>
Objective<T> constant_objective() {
    return {"const", 1, [](std::span<const BasicTensor<T>> z, std::span<const int>, std::span<const T>) {
                LossResult<T> r;
                r.value = T{3};
                r.row_values.assign(z[0].dim(0), T{3});
                r.logit_grads.emplace_back(z[0].shape);
                return r;
            }};
}

} // namespace

TEST(Diffcore, ZeroWeightLinearModelGivesLogKAndZeroInputGrad) {
    const auto spec = ModelSpec::mlp(3, 5, {});
    auto params = init_model(spec, 1);
    for (auto& p : params) std::fill(p.tensor.values.begin(), p.tensor.values.end(), 0.0f);
    const auto x = testutil::random_tensor({4, 3}, 7);
    const std::vector<int> y{0, 1, 2, 4};
    const auto rec = evaluate_with_gradients(params, spec, Batch<float>{x, y}, ce_objective<float>());
    EXPECT_NEAR(rec.loss_value, std::log(5.0), 1e-6);
    for (float g : rec.input_grad.values) EXPECT_EQ(g, 0.0f);
}

TEST(Diffcore, MeanReductionInvariantToDuplication) {
    const auto spec = ModelSpec::mlp(2, 3, {8});
    const auto params = init_model(spec, 3);
    const auto x = testutil::random_tensor({3, 2}, 11);
    const std::vector<int> y{0, 2, 1};
    Tensor x2({6, 2});
    std::copy(x.values.begin(), x.values.end(), x2.values.begin());
    std::copy(x.values.begin(), x.values.end(), x2.values.begin() + 6);
    std::vector<int> y2{0, 2, 1, 0, 2, 1};
    const auto a = evaluate_with_gradients(params, spec, Batch<float>{x, y}, ce_objective<float>());
    const auto b = evaluate_with_gradients(params, spec, Batch<float>{x2, y2}, ce_objective<float>());
    EXPECT_NEAR(a.loss_value, b.loss_value, 1e-6);
    for (std::size_t p = 0; p < a.param_grads.size(); ++p)
        for (std::size_t i = 0; i < a.param_grads[p].size(); ++i)
            EXPECT_NEAR(a.param_grads[p].values[i], b.param_grads[p].values[i], 1e-6);
}

TEST(Diffcore, RandomMlpMatchesFiniteDifferences) {
    const auto spec = ModelSpec::mlp(2, 3, {16});
    const auto params = init_model(spec, 42);
    const auto x = testutil::random_tensor({4, 2}, 5);
    const auto y = testutil::random_labels(4, 3, 6);
    const auto analytic = evaluate_with_gradients(params, spec, Batch<float>{x, y}, ce_objective<float>());

    const auto pd = params.cast<double>();
    const auto xd = x.cast<double>();
    const auto fd = finite_difference_gradient(pd, spec, Batch<double>{xd, y}, ce_objective<double>(), 1e-3);
    for (std::size_t p = 0; p < pd.size(); ++p)
        EXPECT_LE(testutil::worst_relative_error(analytic.param_grads[p].values, fd.param_grads[p].values), 1e-4)
            << params[p].name;
    EXPECT_LE(testutil::worst_relative_error(analytic.input_grad.values, fd.input_grad.values), 1e-4);
}

TEST(Diffcore, TinyCnnMatchesFiniteDifferences) {
    const auto spec = ModelSpec::tiny_cnn(1, 8, 3, {3, 4});
    const auto params = init_model(spec, 9);
    const auto x = testutil::random_tensor({2, 1, 8, 8}, 10);
    const std::vector<int> y{2, 0};
    const auto analytic = evaluate_with_gradients(params, spec, Batch<float>{x, y}, ce_objective<float>());
    const auto fd = finite_difference_gradient(params.cast<double>(), spec, Batch<double>{x.cast<double>(), y},
                                               ce_objective<double>(), 1e-5);
    for (std::size_t p = 0; p < params.size(); ++p)
        EXPECT_LE(testutil::worst_relative_error(analytic.param_grads[p].values, fd.param_grads[p].values), 1e-4)
            << params[p].name;
    EXPECT_LE(testutil::worst_relative_error(analytic.input_grad.values, fd.input_grad.values), 1e-4);
}

TEST(Diffcore, EvaluationIsPureAndDeterministic) {
    const auto spec = ModelSpec::mlp(2, 2, {8, 8});
    const auto params = init_model(spec, 1);
    const auto copy = params;
    const auto x = testutil::random_tensor({5, 2}, 2);
    const auto y = testutil::random_labels(5, 2, 3);
    const auto a = evaluate_with_gradients(params, spec, Batch<float>{x, y}, ce_objective<float>());
    const auto b = evaluate_with_gradients(params, spec, Batch<float>{x, y}, ce_objective<float>());
    EXPECT_EQ(params, copy);
    EXPECT_EQ(a.loss_value, b.loss_value);
    for (std::size_t p = 0; p < a.param_grads.size(); ++p) EXPECT_EQ(a.param_grads[p], b.param_grads[p]);
    EXPECT_EQ(a.input_grad, b.input_grad);
}

TEST(Diffcore, ShapeMismatchNamesTheTensor) {
    const auto spec = ModelSpec::mlp(2, 2, {4});
    auto params = init_model(spec, 1);
    const auto x = testutil::random_tensor({3, 3}, 2);
    const std::vector<int> y{0, 1, 0};
    try {
        evaluate_with_gradients(params, spec, Batch<float>{x, y}, ce_objective<float>());
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_EQ(e.tensor(), "inputs");
    }
    const auto ok = testutil::random_tensor({3, 2}, 2);
    params[2].tensor = Tensor({2, 5});
    try {
        evaluate_with_gradients(params, spec, Batch<float>{ok, y}, ce_objective<float>());
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_EQ(e.tensor(), "fc2.weight");
    }
}

TEST(Diffcore, NonFiniteLossIsReported) {
    const auto spec = ModelSpec::mlp(2, 2, {4});
    auto params = init_model(spec, 1);
    params[3].tensor.values[0] = std::numeric_limits<float>::quiet_NaN();
    const auto x = testutil::random_tensor({2, 2}, 2);
    const std::vector<int> y{0, 1};
    EXPECT_THROW(evaluate_with_gradients(params, spec, Batch<float>{x, y}, ce_objective<float>()), NonFiniteError);
}

TEST(FiniteDifference, LinearLossGivesInput) {
    DotArch arch{3};
    BasicParamSet<double> p;
    p.add("theta", BasicTensor<double>({1, 3}, {0.2, -0.4, 0.9}));
    BasicTensor<double> x({1, 3}, {0.5, 0.25, -2.0});
    const std::vector<int> y{0};
    for (double h : {1e-1, 1e-3}) {
        const auto fd = finite_difference_gradient(p, arch, Batch<double>{x, y}, first_logit_mean<double>(), h);
        for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(fd.param_grads[0].values[i], x.values[i], 1e-12);
    }
}

TEST(FiniteDifference, ConstantLossGivesZero) {
    DotArch arch{2};
    BasicParamSet<double> p;
    p.add("theta", BasicTensor<double>({1, 2}, {1.0, 2.0}));
    BasicTensor<double> x({1, 2}, {0.3, 0.7});
    const std::vector<int> y{0};
    const auto fd = finite_difference_gradient(p, arch, Batch<double>{x, y}, constant_objective<double>(), 1e-2);
    for (double g : fd.param_grads[0].values) EXPECT_EQ(g, 0.0);
}

TEST(FiniteDifference, CentralDifferenceIsExactOnQuadratic) {
    DotArch arch{1};
    BasicParamSet<double> p;
    p.add("theta", BasicTensor<double>({1, 1}, {3.0}));
    BasicTensor<double> x({1, 1}, {1.0});
    const std::vector<int> y{0};
    const auto fd = finite_difference_gradient(p, arch, Batch<double>{x, y}, first_logit_squared<double>(), 0.1);
    EXPECT_NEAR(fd.param_grads[0].values[0], 6.0, 1e-12);
    const auto an = evaluate_with_gradients(p, arch, Batch<double>{x, y}, first_logit_squared<double>());
    EXPECT_DOUBLE_EQ(an.param_grads[0].values[0], 6.0);
}

TEST(FiniteDifference, RejectsNonPositiveStep) {
    DotArch arch{1};
    BasicParamSet<double> p;
    p.add("theta", BasicTensor<double>({1, 1}, {3.0}));
    BasicTensor<double> x({1, 1}, {1.0});
    const std::vector<int> y{0};
    EXPECT_THROW(finite_difference_gradient(p, arch, Batch<double>{x, y}, first_logit_squared<double>(), 0.0),
                 InvalidArgument);
}

TEST(Tape, MaxPoolTiesGoToFirstElement) {
    Tape<float> tape;
    const auto x = tape.input(Tensor({1, 1, 2, 2}, {1.f, 1.f, 1.f, 1.f}), true);
    const auto y = tape.max_pool2(x);
    LossResult<float> r;
    r.value = tape.value(y).values[0];
    r.logit_grads.emplace_back(Shape{1, 1, 1, 1}, std::vector<float>{1.f});
    const Var views[] = {y};
    tape.backward(tape.fused_loss(views, std::move(r)));
    EXPECT_EQ(tape.grad(x).values, (std::vector<float>{1.f, 0.f, 0.f, 0.f}));
}
