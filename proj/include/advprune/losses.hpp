#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "advprune/diffcore.hpp"
#include "advprune/error.hpp"

namespace advprune {

enum class LossKind { ce, trades, mart };

inline std::string to_string(LossKind k) {
    switch (k) {
    case LossKind::ce: return "ce";
    case LossKind::trades: return "trades";
    case LossKind::mart: return "mart";
    }
    return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
    if (s == "ce") return LossKind::ce;
    if (s == "trades") return LossKind::trades;
    if (s == "mart") return LossKind::mart;
    throw InvalidArgument("unknown loss kind '" + s + "'");
}

struct LossConfig {
    LossKind kind = LossKind::trades;
    double beta = 1.0;         // TRADES weight on KL(clean || adv)
    double lambda_mart = 6.0;  // MART weight on the margin-weighted KL

    void validate() const {
        if (!(beta >= 0.0)) throw InvalidArgument("loss beta must be >= 0");
        if (!(lambda_mart >= 0.0)) throw InvalidArgument("MART lambda must be >= 0");
    }
};

/// Clamp applied to 1 − max_{k≠y} p_k before the log in MART's boosted term.
inline constexpr double kMartClamp = 1e-8;

namespace loss_detail {

template <class T>
void check_logits(const BasicTensor<T>& logits, const char* name) {
    if (logits.rank() != 2 || logits.dim(1) < 2)
        throw ShapeError(name, "expected [B,K] with K >= 2, got " + shape_string(logits.shape));
}

template <class T>
void check_labels(const BasicTensor<T>& logits, std::span<const int> labels) {
    if (labels.size() != logits.dim(0))
        throw ShapeError("labels", std::to_string(labels.size()) + " labels for " + std::to_string(logits.dim(0)) + " rows");
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= logits.dim(1))
            throw InvalidArgument("label " + std::to_string(y) + " out of range for " + std::to_string(logits.dim(1)) +
                                  " classes");
}

/// Per-row scale s_i = w_i / Σw (uniform 1/B when no weights are given).
/// A batch whose weights sum to zero contributes nothing.
template <class T>
std::vector<T> row_scales(std::size_t rows, std::span<const T> weights) {
    if (weights.empty()) return std::vector<T>(rows, rows ? T{1} / static_cast<T>(rows) : T{0});
    if (weights.size() != rows) throw ShapeError("weights", "expected " + std::to_string(rows) + " weights");
    T total{0};
    for (T w : weights) {
        if (!(w >= T{0}) || !std::isfinite(w)) throw InvalidArgument("example weights must be finite and >= 0");
        total += w;
    }
    std::vector<T> s(rows, T{0});
    if (total > T{0})
        for (std::size_t i = 0; i < rows; ++i) s[i] = weights[i] / total;
    return s;
}

/// Numerically stable log-softmax of one row; also fills probabilities.
template <class T>
void log_softmax(const T* z, std::size_t k, T* logp, T* p) {
    const T m = *std::max_element(z, z + k);
    T sum{0};
    for (std::size_t c = 0; c < k; ++c) sum += std::exp(z[c] - m);
    const T lse = m + std::log(sum);
    for (std::size_t c = 0; c < k; ++c) {
        logp[c] = z[c] - lse;
        p[c] = std::exp(logp[c]);
    }
}

} // namespace loss_detail

/// Mean (or weighted-mean) negative log-softmax of the true class.
template <class T>
LossResult<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels, std::span<const T> weights = {}) {
    loss_detail::check_logits(logits, "logits");
    loss_detail::check_labels(logits, labels);
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    const auto scale = loss_detail::row_scales<T>(n, weights);
    LossResult<T> r;
    r.row_values.resize(n);
    r.logit_grads.emplace_back(logits.shape);
    auto& g = r.logit_grads[0].values;
    std::vector<T> logp(k), p(k);
    for (std::size_t i = 0; i < n; ++i) {
        loss_detail::log_softmax(&logits.values[i * k], k, logp.data(), p.data());
        const auto y = static_cast<std::size_t>(labels[i]);
        r.row_values[i] = -logp[y];
        r.value += scale[i] * r.row_values[i];
        for (std::size_t c = 0; c < k; ++c) g[i * k + c] = scale[i] * (p[c] - (c == y ? T{1} : T{0}));
    }
    return r;
}

/// Mean over rows of KL(softmax(p) || softmax(q)). Gradients: [d/dp, d/dq].
template <class T>
LossResult<T> kl_divergence(const BasicTensor<T>& p_logits, const BasicTensor<T>& q_logits,
                            std::span<const T> weights = {}) {
    loss_detail::check_logits(p_logits, "p_logits");
    if (q_logits.shape != p_logits.shape)
        throw ShapeError("q_logits", shape_string(q_logits.shape) + " vs p_logits " + shape_string(p_logits.shape));
    const std::size_t n = p_logits.dim(0), k = p_logits.dim(1);
    const auto scale = loss_detail::row_scales<T>(n, weights);
    LossResult<T> r;
    r.row_values.resize(n);
    r.logit_grads.emplace_back(p_logits.shape);
    r.logit_grads.emplace_back(q_logits.shape);
    auto& gp = r.logit_grads[0].values;
    auto& gq = r.logit_grads[1].values;
    std::vector<T> logp(k), p(k), logq(k), q(k);
    for (std::size_t i = 0; i < n; ++i) {
        loss_detail::log_softmax(&p_logits.values[i * k], k, logp.data(), p.data());
        loss_detail::log_softmax(&q_logits.values[i * k], k, logq.data(), q.data());
        T kl{0};
        for (std::size_t c = 0; c < k; ++c) kl += p[c] * (logp[c] - logq[c]);
        kl = std::max(kl, T{0});
        r.row_values[i] = kl;
        r.value += scale[i] * kl;
        for (std::size_t c = 0; c < k; ++c) {
            gp[i * k + c] = scale[i] * p[c] * (logp[c] - logq[c] - kl);
            gq[i * k + c] = scale[i] * (q[c] - p[c]);
        }
    }
    return r;
}

/// CE(clean) + beta · KL(clean || adv). Gradients: [d/dclean, d/dadv].
template <class T>
LossResult<T> trades_loss(const BasicTensor<T>& clean_logits, const BasicTensor<T>& adv_logits,
                          std::span<const int> labels, const LossConfig& cfg, std::span<const T> weights = {}) {
    cfg.validate();
    auto ce = cross_entropy(clean_logits, labels, weights);
    auto kl = kl_divergence(clean_logits, adv_logits, weights);
    const T beta = static_cast<T>(cfg.beta);
    LossResult<T> r;
    r.value = ce.value + beta * kl.value;
    r.row_values.resize(ce.row_values.size());
    for (std::size_t i = 0; i < r.row_values.size(); ++i) r.row_values[i] = ce.row_values[i] + beta * kl.row_values[i];
    r.logit_grads.push_back(std::move(ce.logit_grads[0]));
    for (std::size_t j = 0; j < r.logit_grads[0].size(); ++j) r.logit_grads[0].values[j] += beta * kl.logit_grads[0].values[j];
    r.logit_grads.push_back(std::move(kl.logit_grads[1]));
    for (auto& v : r.logit_grads[1].values) v *= beta;
    return r;
}

/// MART: boosted CE on the adversarial logits plus lambda times the
/// KL(clean || adv) of each row weighted by (1 − p_clean,y).
/// Gradients: [d/dclean, d/dadv].
template <class T>
LossResult<T> mart_loss(const BasicTensor<T>& clean_logits, const BasicTensor<T>& adv_logits,
                        std::span<const int> labels, const LossConfig& cfg, std::span<const T> weights = {}) {
    cfg.validate();
    loss_detail::check_logits(clean_logits, "clean_logits");
    if (adv_logits.shape != clean_logits.shape)
        throw ShapeError("adv_logits", shape_string(adv_logits.shape) + " vs clean " + shape_string(clean_logits.shape));
    loss_detail::check_labels(clean_logits, labels);
    const std::size_t n = clean_logits.dim(0), k = clean_logits.dim(1);
    const auto scale = loss_detail::row_scales<T>(n, weights);
    const T lambda = static_cast<T>(cfg.lambda_mart);
    LossResult<T> r;
    r.row_values.resize(n);
    r.logit_grads.emplace_back(clean_logits.shape);
    r.logit_grads.emplace_back(adv_logits.shape);
    auto& ga = r.logit_grads[0].values;
    auto& gb = r.logit_grads[1].values;
    std::vector<T> logp(k), p(k), logq(k), q(k);
    for (std::size_t i = 0; i < n; ++i) {
        loss_detail::log_softmax(&clean_logits.values[i * k], k, logp.data(), p.data());
        loss_detail::log_softmax(&adv_logits.values[i * k], k, logq.data(), q.data());
        const auto y = static_cast<std::size_t>(labels[i]);
        std::size_t m = y == 0 ? 1 : 0;
        for (std::size_t c = 0; c < k; ++c)
            if (c != y && q[c] > q[m]) m = c;
        const T rest = T{1} - q[m];
        const bool clamped = !(rest > static_cast<T>(kMartClamp));
        const T boosted = -logq[y] - std::log(clamped ? static_cast<T>(kMartClamp) : rest);

        T kl{0};
        for (std::size_t c = 0; c < k; ++c) kl += p[c] * (logp[c] - logq[c]);
        kl = std::max(kl, T{0});
        const T margin = T{1} - p[y];
        r.row_values[i] = boosted + lambda * kl * margin;
        r.value += scale[i] * r.row_values[i];

        const T s = scale[i];
        for (std::size_t c = 0; c < k; ++c) {
            const T dy = c == y ? T{1} : T{0};
            T db = q[c] - dy;
            if (!clamped) db += q[m] * ((c == m ? T{1} : T{0}) - q[c]) / rest;
            db += lambda * margin * (q[c] - p[c]);
            const T da = lambda * (margin * p[c] * (logp[c] - logq[c] - kl) - kl * p[y] * (dy - p[c]));
            ga[i * k + c] = s * da;
            gb[i * k + c] = s * db;
        }
    }
    return r;
}

/// Margin loss max_{k≠y} z_k − z_y; used as an alternative attack objective.
template <class T>
LossResult<T> margin_loss(const BasicTensor<T>& logits, std::span<const int> labels, std::span<const T> weights = {}) {
    loss_detail::check_logits(logits, "logits");
    loss_detail::check_labels(logits, labels);
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    const auto scale = loss_detail::row_scales<T>(n, weights);
    LossResult<T> r;
    r.row_values.resize(n);
    r.logit_grads.emplace_back(logits.shape);
    for (std::size_t i = 0; i < n; ++i) {
        const T* z = &logits.values[i * k];
        const auto y = static_cast<std::size_t>(labels[i]);
        std::size_t m = y == 0 ? 1 : 0;
        for (std::size_t c = 0; c < k; ++c)
            if (c != y && z[c] > z[m]) m = c;
        r.row_values[i] = z[m] - z[y];
        r.value += scale[i] * r.row_values[i];
        r.logit_grads[0].values[i * k + m] = scale[i];
        r.logit_grads[0].values[i * k + y] = -scale[i];
    }
    return r;
}

// Objective handles for diffcore.

template <class T>
Objective<T> ce_objective() {
    return {"ce", 1, [](std::span<const BasicTensor<T>> z, std::span<const int> y, std::span<const T> w) {
                return cross_entropy(z[0], y, w);
            }};
}

template <class T>
Objective<T> margin_objective() {
    return {"margin", 1, [](std::span<const BasicTensor<T>> z, std::span<const int> y, std::span<const T> w) {
                return margin_loss(z[0], y, w);
            }};
}

/// KL(anchor || perturbed); labels are ignored.
template <class T>
Objective<T> kl_objective() {
    return {"kl", 2, [](std::span<const BasicTensor<T>> z, std::span<const int>, std::span<const T> w) {
                return kl_divergence(z[0], z[1], w);
            }};
}

template <class T>
Objective<T> trades_objective(const LossConfig& cfg) {
    return {"trades", 2, [cfg](std::span<const BasicTensor<T>> z, std::span<const int> y, std::span<const T> w) {
                return trades_loss(z[0], z[1], y, cfg, w);
            }};
}

template <class T>
Objective<T> mart_objective(const LossConfig& cfg) {
    return {"mart", 2, [cfg](std::span<const BasicTensor<T>> z, std::span<const int> y, std::span<const T> w) {
                return mart_loss(z[0], z[1], y, cfg, w);
            }};
}

/// Outer-minimization loss. For `ce` this is plain AT on the perturbed inputs.
template <class T>
Objective<T> training_objective(const LossConfig& cfg) {
    switch (cfg.kind) {
    case LossKind::ce: return ce_objective<T>();
    case LossKind::trades: return trades_objective<T>(cfg);
    case LossKind::mart: return mart_objective<T>(cfg);
    }
    throw InvalidArgument("unknown loss kind");
}

/// Inner-maximization objective: TRADES attacks the KL term, CE and MART attack CE.
template <class T>
Objective<T> attack_objective(const LossConfig& cfg) {
    return cfg.kind == LossKind::trades ? kl_objective<T>() : ce_objective<T>();
}

} // namespace advprune
