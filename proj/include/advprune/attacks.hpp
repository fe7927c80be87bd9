#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "advprune/csv.hpp"
#include "advprune/data.hpp"
#include "advprune/diffcore.hpp"
#include "advprune/error.hpp"
#include "advprune/losses.hpp"
#include "advprune/models.hpp"
#include "advprune/rng.hpp"

namespace advprune {

/// ℓ∞ attack budget and iteration schedule.
struct AttackSpec {
    double epsilon = 8.0 / 255.0;
    double alpha = 2.0 / 255.0;
    int steps = 10;
    int restarts = 1;
    bool random_init = true;
    double lo = 0.0;
    double hi = 1.0;

    void validate() const {
        if (!(epsilon >= 0.0)) throw InvalidArgument("attack epsilon must be >= 0");
        if (steps < 0) throw InvalidArgument("attack steps must be >= 0");
        if (steps > 0 && !(alpha > 0.0)) throw InvalidArgument("attack alpha must be > 0 when steps > 0");
        if (restarts < 1) throw InvalidArgument("attack restarts must be >= 1");
        if (!(lo <= hi)) throw InvalidArgument("attack pixel bounds must satisfy lo <= hi");
    }

    /// Training-time adversary: 10 steps of ε/4 from a random start.
    static AttackSpec training(double eps) { return {eps, eps / 4.0, 10, 1, true}; }
    /// PGD-50-10 with α = 2/255.
    static AttackSpec evaluation(double eps) { return {eps, 2.0 / 255.0, 50, 10, true}; }
    /// PGD-5-1 used to categorize examples.
    static AttackSpec probe(double eps) { return {eps, eps / 4.0, 5, 1, true}; }
};

/// Clamp each candidate into [x−ε, x+ε] ∩ [lo, hi].
template <class T>
BasicTensor<T> project_linf(const BasicTensor<T>& clean, const BasicTensor<T>& candidate, const AttackSpec& spec) {
    if (clean.shape != candidate.shape)
        throw ShapeError("candidate", shape_string(candidate.shape) + " vs clean " + shape_string(clean.shape));
    const T eps = static_cast<T>(spec.epsilon), lo = static_cast<T>(spec.lo), hi = static_cast<T>(spec.hi);
    BasicTensor<T> out = candidate;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T x = clean.values[i];
        T v = std::clamp(out.values[i], x - eps, x + eps);
        out.values[i] = std::clamp(v, lo, hi);
    }
    return out;
}

template <class T>
constexpr T sign_of(T g) {
    return g > T{0} ? T{1} : (g < T{0} ? T{-1} : T{0});
}

/// Gradient of an attack objective with respect to the inputs, plus the
/// per-row objective values at those inputs.
template <class T>
struct InputGradient {
    std::vector<T> row_losses;
    BasicTensor<T> grad;
};

template <class T>
using InputGradientFn = std::function<InputGradient<T>(const BasicTensor<T>&)>;

/// Sign-gradient ascent with projection, independent of any model. Runs
/// `restarts` trajectories and keeps, per row, the final iterate with the
/// largest objective (earlier restart wins ties). `on_iterate`, if set, sees
/// every iterate of every restart.
template <class T>
BasicTensor<T> pgd_ascent(const BasicTensor<T>& clean, const AttackSpec& spec, const InputGradientFn<T>& gradient,
                          Rng& rng, const std::function<void(const BasicTensor<T>&)>& on_iterate = {}) {
    spec.validate();
    if (spec.epsilon == 0.0 || spec.steps == 0) return clean;
    const std::size_t rows = clean.empty() ? 0 : clean.dim(0);
    const T alpha = static_cast<T>(spec.alpha), eps = static_cast<T>(spec.epsilon);

    BasicTensor<T> best;
    std::vector<T> best_loss;
    for (int r = 0; r < spec.restarts; ++r) {
        BasicTensor<T> x = clean;
        if (spec.random_init) {
            for (auto& v : x.values) v += static_cast<T>(rng.uniform(-1.0, 1.0)) * eps;
            x = project_linf(clean, x, spec);
        }
        for (int s = 0; s < spec.steps; ++s) {
            const auto g = gradient(x);
            for (std::size_t i = 0; i < x.size(); ++i) x.values[i] += alpha * sign_of(g.grad.values[i]);
            x = project_linf(clean, x, spec);
            if (on_iterate) on_iterate(x);
        }
        if (spec.restarts == 1) return x;
        const auto final_loss = gradient(x).row_losses;
        if (r == 0) {
            best = std::move(x);
            best_loss = final_loss;
            continue;
        }
        const std::size_t stride = best.row_size();
        for (std::size_t i = 0; i < rows; ++i)
            if (final_loss[i] > best_loss[i]) {
                best_loss[i] = final_loss[i];
                std::copy_n(x.values.begin() + static_cast<std::ptrdiff_t>(i * stride), stride,
                            best.values.begin() + static_cast<std::ptrdiff_t>(i * stride));
            }
    }
    return best;
}

namespace attack_detail {

template <class T>
InputGradientFn<T> model_gradient(const BasicParamSet<T>& params, const ModelSpec& spec, std::span<const int> labels,
                                  const Objective<T>& objective, const BasicTensor<T>* anchor_logits) {
    return [&params, &spec, labels, &objective, anchor_logits](const BasicTensor<T>& x) {
        auto rec = evaluate_with_gradients(params, spec, Batch<T>{x, labels, {}, nullptr, anchor_logits}, objective,
                                           GradRequest{false, true});
        return InputGradient<T>{std::move(rec.row_losses), std::move(rec.input_grad)};
    };
}

} // namespace attack_detail

/// One step of ε·sign(∇ₓL) from the clean inputs, projected.
template <class T>
BasicTensor<T> fgsm_perturb(const BasicParamSet<T>& params, const ModelSpec& spec, const BasicTensor<T>& inputs,
                            std::span<const int> labels, const Objective<T>& objective, const AttackSpec& attack) {
    attack.validate();
    BasicTensor<T> anchor;
    if (objective.views == 2) anchor = forward_logits(params, spec, inputs);
    auto grad = attack_detail::model_gradient(params, spec, labels, objective, objective.views == 2 ? &anchor : nullptr);
    const auto g = grad(inputs);
    BasicTensor<T> x = inputs;
    const T eps = static_cast<T>(attack.epsilon);
    for (std::size_t i = 0; i < x.size(); ++i) x.values[i] += eps * sign_of(g.grad.values[i]);
    return project_linf(inputs, x, attack);
}

/// Projected gradient descent on the inputs (ascent on the objective).
/// Two-view objectives compare against the clean logits, held constant.
template <class T>
BasicTensor<T> pgd_attack(const BasicParamSet<T>& params, const ModelSpec& spec, const BasicTensor<T>& inputs,
                          std::span<const int> labels, const Objective<T>& objective, const AttackSpec& attack,
                          std::uint64_t seed) {
    attack.validate();
    if (inputs.empty()) return inputs;
    if (attack.epsilon == 0.0 || attack.steps == 0) return inputs;
    BasicTensor<T> anchor;
    if (objective.views == 2) anchor = forward_logits(params, spec, inputs);
    Rng rng(seed);
    return pgd_ascent(inputs, attack,
                      attack_detail::model_gradient(params, spec, labels, objective,
                                                    objective.views == 2 ? &anchor : nullptr),
                      rng);
}

struct RobustnessRow {
    double epsilon = 0.0;
    double clean_acc = 0.0;
    double robust_acc = 0.0;
    std::size_t examples = 0;
    double seconds = 0.0;
};

struct RobustnessReport {
    double clean_acc = 0.0;
    std::vector<RobustnessRow> rows;

    void write_csv(std::ostream& out) const {
        out << "epsilon,clean_acc,robust_acc,examples,seconds\n";
        for (const auto& r : rows)
            out << csv_number(r.epsilon) << ',' << csv_number(r.clean_acc) << ',' << csv_number(r.robust_acc) << ','
                << r.examples << ',' << csv_number(r.seconds) << '\n';
    }
};

enum class EvalObjective { ce, margin };

/// Clean and worst-case accuracy for each attack. An example is robust only
/// if it is classified correctly clean and at the final iterate of every
/// restart. Deterministic given `seed`.
inline RobustnessReport evaluate_robust_accuracy(const ParamSet& params, const ModelSpec& spec, const Dataset& data,
                                                 std::span<const AttackSpec> attacks, std::uint64_t seed,
                                                 EvalObjective kind = EvalObjective::ce, std::size_t batch_size = 256) {
    if (data.empty()) throw InvalidArgument("cannot evaluate robustness on an empty dataset");
    const auto objective = kind == EvalObjective::ce ? ce_objective<float>() : margin_objective<float>();
    const std::size_t n = data.size();

    std::vector<char> clean_ok(n);
    for (std::size_t b = 0; b < n; b += batch_size) {
        const std::size_t e = std::min(n, b + batch_size);
        const auto pred = predict(params, spec, slice_rows(data.inputs, b, e));
        for (std::size_t i = b; i < e; ++i) clean_ok[i] = pred[i - b] == data.labels[i];
    }
    RobustnessReport report;
    report.clean_acc = static_cast<double>(std::count(clean_ok.begin(), clean_ok.end(), 1)) / static_cast<double>(n);

    for (std::size_t a = 0; a < attacks.size(); ++a) {
        const auto& attack = attacks[a];
        attack.validate();
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<char> robust = clean_ok;
        AttackSpec single = attack;
        single.restarts = 1;
        for (std::size_t b = 0; b < n; b += batch_size) {
            const std::size_t e = std::min(n, b + batch_size);
            const auto x = slice_rows(data.inputs, b, e);
            const std::span<const int> y(data.labels.data() + b, e - b);
            for (int r = 0; r < attack.restarts; ++r) {
                const auto adv = pgd_attack(params, spec, x, y, objective, single,
                                            derive_seed(seed, {0xe7a1, a, b, static_cast<std::uint64_t>(r)}));
                const auto pred = predict(params, spec, adv);
                for (std::size_t i = b; i < e; ++i)
                    if (pred[i - b] != data.labels[i]) robust[i] = 0;
            }
        }
        RobustnessRow row;
        row.epsilon = attack.epsilon;
        row.clean_acc = report.clean_acc;
        row.robust_acc = static_cast<double>(std::count(robust.begin(), robust.end(), 1)) / static_cast<double>(n);
        row.examples = n;
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.rows.push_back(row);
    }
    return report;
}

} // namespace advprune
