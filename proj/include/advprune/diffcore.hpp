#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <vector>

#include "advprune/error.hpp"
#include "advprune/tape.hpp"
#include "advprune/tensor.hpp"

namespace advprune {

template <class T>
struct NamedTensor {
    std::string name;
    BasicTensor<T> tensor;
    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Ordered, uniquely named model parameters. The order fixes both the
/// update order and the layout of flattened parameter vectors.
template <class T>
class BasicParamSet {
public:
    void add(std::string name, BasicTensor<T> tensor) {
        for (const auto& p : items_)
            if (p.name == name) throw InvalidArgument("duplicate parameter name '" + name + "'");
        items_.push_back({std::move(name), std::move(tensor)});
    }

    std::size_t size() const noexcept { return items_.size(); }
    NamedTensor<T>& operator[](std::size_t i) { return items_[i]; }
    const NamedTensor<T>& operator[](std::size_t i) const { return items_[i]; }
    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    const BasicTensor<T>& at(const std::string& name) const {
        for (const auto& p : items_)
            if (p.name == name) return p.tensor;
        throw InvalidArgument("no parameter named '" + name + "'");
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : items_) n += p.tensor.size();
        return n;
    }

    /// Same names and shapes, all zeros.
    /// Same names and shapes in the same order.
    template <class U>
    bool same_shapes(const BasicParamSet<U>& other) const {
        if (size() != other.size()) return false;
        for (std::size_t i = 0; i < size(); ++i)
            if (items_[i].name != other[i].name || items_[i].tensor.shape != other[i].tensor.shape) return false;
        return true;
    }

    BasicParamSet zeros_like() const {
        BasicParamSet out;
        for (const auto& p : items_) out.items_.push_back({p.name, BasicTensor<T>(p.tensor.shape)});
        return out;
    }

    template <class U>
    BasicParamSet<U> cast() const {
        BasicParamSet<U> out;
        for (const auto& p : items_) out.add(p.name, p.tensor.template cast<U>());
        return out;
    }

    friend bool operator==(const BasicParamSet&, const BasicParamSet&) = default;

private:
    std::vector<NamedTensor<T>> items_;
};

using ParamSet = BasicParamSet<float>;

/// A loss over logits with a fused analytic gradient. `views` is 1 for losses
/// of the perturbed input alone, 2 for losses that compare the logits of a
/// clean anchor (view 0) with those of the perturbed input (view 1).
template <class T>
struct Objective {
    using Fn = std::function<LossResult<T>(std::span<const BasicTensor<T>> logits, std::span<const int> labels,
                                           std::span<const T> weights)>;
    std::string name;
    int views = 1;
    Fn fn;
};

/// Inputs and labels for one evaluation. For two-view objectives the anchor
/// is either precomputed constant logits, clean inputs that are forwarded
/// through the model, or (when neither is given) the inputs themselves.
template <class T>
struct Batch {
    const BasicTensor<T>& inputs;
    std::span<const int> labels;
    std::span<const T> weights = {};
    const BasicTensor<T>* anchor_inputs = nullptr;
    const BasicTensor<T>* anchor_logits = nullptr;
};

template <class T>
struct GradientRecord {
    std::vector<BasicTensor<T>> param_grads;
    BasicTensor<T> input_grad;
    T loss_value{};
    std::vector<T> row_losses;
};

struct GradRequest {
    bool params = true;
    bool input = true;
};

/// A network whose forward pass can be recorded on a Tape.
template <class A, class T>
concept Architecture = requires(const A& a, Tape<T>& tape, std::span<const Var> params, Var x,
                                const BasicParamSet<T>& ps, const Shape& shape) {
    { a.forward(tape, params, x) } -> std::same_as<Var>;
    a.check_params(ps);
    a.check_inputs(shape);
    { a.class_count() } -> std::convertible_to<std::size_t>;
};

namespace detail {

template <class T, class A>
void check_batch(const A& arch, const BasicParamSet<T>& params, const Batch<T>& batch, const Objective<T>& objective) {
    arch.check_params(params);
    arch.check_inputs(batch.inputs.shape);
    const std::size_t n = batch.inputs.dim(0);
    if (batch.labels.size() != n)
        throw ShapeError("labels", "expected " + std::to_string(n) + " labels, got " + std::to_string(batch.labels.size()));
    if (!batch.weights.empty() && batch.weights.size() != n)
        throw ShapeError("weights", "expected " + std::to_string(n) + " weights, got " +
                                        std::to_string(batch.weights.size()));
    for (int y : batch.labels)
        if (y < 0 || static_cast<std::size_t>(y) >= arch.class_count())
            throw InvalidArgument("label " + std::to_string(y) + " outside [0," + std::to_string(arch.class_count()) + ")");
    if (objective.views == 2) {
        if (batch.anchor_inputs && batch.anchor_inputs->shape != batch.inputs.shape)
            throw ShapeError("anchor_inputs", shape_string(batch.anchor_inputs->shape) + " vs inputs " +
                                                  shape_string(batch.inputs.shape));
        if (batch.anchor_logits && (batch.anchor_logits->rank() != 2 || batch.anchor_logits->dim(0) != n))
            throw ShapeError("anchor_logits", "expected [" + std::to_string(n) + ",K], got " +
                                                  shape_string(batch.anchor_logits->shape));
    }
}

template <class T, class A>
LossResult<T> run(const A& arch, const BasicParamSet<T>& params, const Batch<T>& batch, const Objective<T>& objective,
                  GradRequest want, std::type_identity_t<GradientRecord<T>>* record) {
    Tape<T> tape;
    std::vector<Var> pv;
    pv.reserve(params.size());
    for (const auto& p : params) pv.push_back(tape.input(p.tensor, want.params));
    const Var x = tape.input(batch.inputs, want.input);
    const Var logits = arch.forward(tape, pv, x);

    std::vector<Var> views{logits};
    if (objective.views == 2) {
        Var anchor = logits;
        if (batch.anchor_logits)
            anchor = tape.input(*batch.anchor_logits, false);
        else if (batch.anchor_inputs)
            anchor = arch.forward(tape, pv, tape.input(*batch.anchor_inputs, false));
        views = {anchor, logits};
    }
    std::vector<BasicTensor<T>> values;
    for (Var v : views) values.push_back(tape.value(v));
    LossResult<T> result = objective.fn(values, batch.labels, batch.weights);
    if (!std::isfinite(result.value)) throw NonFiniteError("non-finite loss from objective '" + objective.name + "'");

    if (record) {
        record->loss_value = result.value;
        record->row_losses = result.row_values;
        const Var root = tape.fused_loss(views, std::move(result));
        tape.backward(root);
        record->param_grads.clear();
        if (want.params)
            for (Var v : pv) record->param_grads.push_back(tape.grad(v));
        if (want.input) record->input_grad = tape.grad(x);
        return {};
    }
    return result;
}

} // namespace detail

/// Loss plus gradients with respect to every parameter and to the inputs.
/// Pure: the parameters are copied onto a private tape.
template <class T, Architecture<T> A>
GradientRecord<T> evaluate_with_gradients(const BasicParamSet<T>& params, const A& arch, const Batch<T>& batch,
                                          const Objective<T>& objective, GradRequest want = {}) {
    detail::check_batch(arch, params, batch, objective);
    GradientRecord<T> record;
    detail::run(arch, params, batch, objective, want, &record);
    for (std::size_t i = 0; i < record.param_grads.size(); ++i)
        if (!record.param_grads[i].all_finite())
            throw NonFiniteError("non-finite gradient for parameter '" + params[i].name + "'");
    return record;
}

/// Forward-only evaluation of the objective.
template <class T, Architecture<T> A>
LossResult<T> evaluate_loss(const BasicParamSet<T>& params, const A& arch, const Batch<T>& batch,
                            const Objective<T>& objective) {
    detail::check_batch(arch, params, batch, objective);
    return detail::run(arch, params, batch, objective, GradRequest{false, false}, nullptr);
}

/// Central differences (L(θ+h·e_i) − L(θ−h·e_i)) / 2h for every parameter
/// scalar and every input scalar. Uses forward evaluations only.
template <class T, Architecture<T> A>
GradientRecord<T> finite_difference_gradient(const BasicParamSet<T>& params, const A& arch, const Batch<T>& batch,
                                             const Objective<T>& objective, T h) {
    if (!(h > T{0})) throw InvalidArgument("finite difference step must be positive");
    detail::check_batch(arch, params, batch, objective);
    auto loss_at = [&](const BasicParamSet<T>& ps, const BasicTensor<T>& inputs) {
        Batch<T> b{inputs, batch.labels, batch.weights, batch.anchor_inputs, batch.anchor_logits};
        return detail::run(arch, ps, b, objective, GradRequest{false, false}, nullptr).value;
    };

    GradientRecord<T> record;
    record.loss_value = loss_at(params, batch.inputs);
    BasicParamSet<T> probe = params;
    for (std::size_t p = 0; p < probe.size(); ++p) {
        BasicTensor<T> g(probe[p].tensor.shape);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T orig = probe[p].tensor.values[i];
            probe[p].tensor.values[i] = orig + h;
            const T up = loss_at(probe, batch.inputs);
            probe[p].tensor.values[i] = orig - h;
            const T down = loss_at(probe, batch.inputs);
            probe[p].tensor.values[i] = orig;
            g.values[i] = (up - down) / (T{2} * h);
        }
        record.param_grads.push_back(std::move(g));
    }
    BasicTensor<T> xin = batch.inputs;
    record.input_grad = BasicTensor<T>(xin.shape);
    for (std::size_t i = 0; i < xin.size(); ++i) {
        const T orig = xin.values[i];
        xin.values[i] = orig + h;
        const T up = loss_at(params, xin);
        xin.values[i] = orig - h;
        const T down = loss_at(params, xin);
        xin.values[i] = orig;
        record.input_grad.values[i] = (up - down) / (T{2} * h);
    }
    return record;
}

} // namespace advprune
