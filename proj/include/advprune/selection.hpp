#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "advprune/attacks.hpp"
#include "advprune/csv.hpp"
#include "advprune/data.hpp"
#include "advprune/diffcore.hpp"
#include "advprune/error.hpp"
#include "advprune/losses.hpp"
#include "advprune/models.hpp"
#include "advprune/rng.hpp"

namespace advprune {

/// `full` disables pruning: every example with unit weight, no selection rounds.
enum class SelectorKind { full, random, glister, gradmatch };

inline std::string to_string(SelectorKind k) {
    switch (k) {
    case SelectorKind::full: return "full";
    case SelectorKind::random: return "random";
    case SelectorKind::glister: return "glister";
    case SelectorKind::gradmatch: return "gradmatch";
    }
    return "?";
}

inline SelectorKind parse_selector_kind(const std::string& s) {
    if (s == "full") return SelectorKind::full;
    if (s == "random") return SelectorKind::random;
    if (s == "glister") return SelectorKind::glister;
    if (s == "gradmatch") return SelectorKind::gradmatch;
    throw InvalidArgument("unknown selector kind '" + s + "'");
}

struct SelectorConfig {
    SelectorKind kind = SelectorKind::random;
    double fraction = 0.3;
    AttackSpec selection_attack{8.0 / 255.0, 2.0 / 255.0, 5, 1, true};
    double glister_eta = 0.1;
    /// Ridge term of the OMP refits. With 0 the full-data target lies in the
    /// span of the columns, so OMP converges after rank-many picks and the
    /// remaining budget is filled at unit weight. A positive value keeps the
    /// residual above the tolerance and OMP keeps picking past the gradient
    /// dimension, where the clamped refits zero out many weights.
    double omp_lambda = 0.0;
    /// Relative to the norm of the full-data gradient.
    double omp_tol = 1e-4;

    void validate() const {
        if (!(fraction > 0.0 && fraction <= 1.0)) throw InvalidArgument("selector fraction must be in (0,1]");
        if (!(omp_tol >= 0.0)) throw InvalidArgument("omp_tol must be >= 0");
        if (!(omp_lambda >= 0.0)) throw InvalidArgument("omp_lambda must be >= 0");
        if (!(glister_eta > 0.0)) throw InvalidArgument("glister_eta must be > 0");
        selection_attack.validate();
    }

    std::size_t subset_size(std::size_t n) const {
        if (n == 0) throw InvalidArgument("cannot select from an empty dataset");
        const double raw = std::ceil(fraction * static_cast<double>(n) - 1e-9);
        return std::clamp<std::size_t>(static_cast<std::size_t>(raw), 1, n);
    }
};

struct SubsetSelection {
    std::vector<std::size_t> indices;
    std::vector<float> weights;
    double objective = 0.0;
    double select_seconds = 0.0;
    bool warning = false;

    std::size_t size() const noexcept { return indices.size(); }

    void validate(std::size_t n) const {
        if (indices.size() != weights.size()) throw InvalidArgument("selection has mismatched weights");
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] >= n) throw InvalidArgument("selected index out of range");
            if (i > 0 && indices[i] <= indices[i - 1]) throw InvalidArgument("selected indices not sorted and unique");
            if (!(weights[i] >= 0.0f)) throw InvalidArgument("selected weight is negative");
        }
    }

    static SubsetSelection all(std::size_t n) {
        SubsetSelection s;
        s.indices.resize(n);
        std::iota(s.indices.begin(), s.indices.end(), std::size_t{0});
        s.weights.assign(n, 1.0f);
        return s;
    }

    void write_csv(std::ostream& out, std::size_t round, bool header) const {
        if (header) out << "round,index,weight\n";
        for (std::size_t i = 0; i < indices.size(); ++i)
            out << round << ',' << indices[i] << ',' << csv_number(weights[i]) << '\n';
    }
};

namespace select_detail {

// Sorts (index, weight) pairs by index.
inline SubsetSelection sorted_selection(std::vector<std::size_t> idx, std::vector<float> w) {
    std::vector<std::size_t> order(idx.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return idx[a] < idx[b]; });
    SubsetSelection s;
    for (auto o : order) {
        s.indices.push_back(idx[o]);
        s.weights.push_back(w[o]);
    }
    return s;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace select_detail

/// Uniform sample of k of n indices without replacement, unit weights.
inline SubsetSelection select_random(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k < 1 || k > n) throw InvalidArgument("random selection needs 1 <= k <= n");
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(n - i)]);
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    SubsetSelection s;
    s.indices = std::move(pool);
    s.weights.assign(k, 1.0f);
    return s;
}

/// Per-example gradient of `objective` with respect to the final dense layer,
/// one row per example laid out as weight [K,F] row-major then bias [K].
/// Two-view objectives use `anchor_inputs` (or the inputs) as the clean view
/// and sum the contributions of both views.
template <class T>
BasicTensor<T> last_layer_gradients(const BasicParamSet<T>& params, const ModelSpec& spec, const BasicTensor<T>& inputs,
                                    std::span<const int> labels, const Objective<T>& objective,
                                    const BasicTensor<T>* anchor_inputs = nullptr) {
    if (inputs.empty() || inputs.dim(0) == 0) throw InvalidArgument("last_layer_gradients needs at least one example");
    const std::size_t n = inputs.dim(0), K = spec.class_count(), F = spec.feature_width();
    if (labels.size() != n) throw ShapeError("labels", "expected " + std::to_string(n) + " labels");

    std::vector<ForwardResult<T>> views;
    if (objective.views == 2) views.push_back(forward_with_features(params, spec, anchor_inputs ? *anchor_inputs : inputs));
    views.push_back(forward_with_features(params, spec, inputs));
    std::vector<BasicTensor<T>> logits;
    for (const auto& v : views) logits.push_back(v.logits);
    const auto res = objective.fn(logits, labels, {});
    if (!std::isfinite(res.value)) throw NonFiniteError("non-finite loss from objective '" + objective.name + "'");

    const T scale = static_cast<T>(n);
    BasicTensor<T> g({n, K * (F + 1)});
    for (std::size_t v = 0; v < views.size(); ++v) {
        const auto& dz = res.logit_grads[v];
        const auto& feat = views[v].features;
        for (std::size_t i = 0; i < n; ++i) {
            T* row = g.values.data() + i * K * (F + 1);
            const T* f = feat.values.data() + i * F;
            for (std::size_t c = 0; c < K; ++c) {
                const T d = dz.values[i * K + c] * scale;
                for (std::size_t j = 0; j < F; ++j) row[c * F + j] += d * f[j];
                row[K * F + c] += d;
            }
        }
    }
    return g;
}

struct OmpResult {
    std::vector<std::size_t> indices;  // in pick order
    std::vector<double> weights;
    /// Residual norm after each refit, before the final non-negativity projection.
    std::vector<double> residual_history;
    /// ‖A_S w − b‖ for the projected weights, rounded to float.
    float residual_norm = 0.0f;
    bool warning = false;
};

namespace select_detail {

inline Eigen::VectorXd ridge_fit(const Eigen::MatrixXd& A, const Eigen::VectorXd& b, double lambda) {
    if (lambda == 0.0) return A.colPivHouseholderQr().solve(b);
    const auto d = A.rows(), s = A.cols();
    Eigen::MatrixXd aug(d + s, s);
    aug.topRows(d) = A;
    aug.bottomRows(s) = std::sqrt(lambda) * Eigen::MatrixXd::Identity(s, s);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(d + s);
    rhs.head(d) = b;
    return aug.colPivHouseholderQr().solve(rhs);
}

} // namespace select_detail

/// Orthogonal matching pursuit with ridge refits. Columns are candidates.
/// Picks the column with the largest normalized |⟨a_j, r⟩| / ‖a_j‖ (lowest
/// index on ties), stops at k columns, when ‖r‖ <= tol, or when no column
/// correlates with a nonzero residual (then `warning` is set).
inline OmpResult omp_solve(const Eigen::MatrixXd& columns, const Eigen::VectorXd& target, std::size_t k, double lambda,
                           double tol) {
    const auto m = static_cast<std::size_t>(columns.cols());
    if (k > m) throw InvalidArgument("omp_solve: k = " + std::to_string(k) + " exceeds " + std::to_string(m) + " columns");
    if (columns.rows() != target.size()) throw ShapeError("target", "length does not match column height");
    if (!(lambda >= 0.0) || !(tol >= 0.0)) throw InvalidArgument("omp_solve: lambda and tol must be >= 0");

    OmpResult out;
    const Eigen::VectorXd norms = columns.colwise().norm();
    std::vector<char> used(m, 0);
    Eigen::VectorXd residual = target;
    Eigen::VectorXd w;
    while (out.indices.size() < k) {
        if (residual.norm() <= tol) break;
        const Eigen::VectorXd corr = columns.transpose() * residual;
        std::size_t best = m;
        double best_score = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            if (used[j] || norms[static_cast<Eigen::Index>(j)] == 0.0) continue;
            const double score = std::abs(corr[static_cast<Eigen::Index>(j)]) / norms[static_cast<Eigen::Index>(j)];
            if (score > best_score) {
                best_score = score;
                best = j;
            }
        }
        if (best == m) {
            out.warning = true;
            break;
        }
        used[best] = 1;
        out.indices.push_back(best);
        Eigen::MatrixXd sub(columns.rows(), static_cast<Eigen::Index>(out.indices.size()));
        for (std::size_t s = 0; s < out.indices.size(); ++s)
            sub.col(static_cast<Eigen::Index>(s)) = columns.col(static_cast<Eigen::Index>(out.indices[s]));
        w = select_detail::ridge_fit(sub, target, lambda);
        residual = target - sub * w;
        out.residual_history.push_back(residual.norm());
    }

    Eigen::VectorXd fit = Eigen::VectorXd::Zero(target.size());
    for (std::size_t s = 0; s < out.indices.size(); ++s) {
        const double ws = std::max(0.0, w[static_cast<Eigen::Index>(s)]);
        out.weights.push_back(ws);
        fit += ws * columns.col(static_cast<Eigen::Index>(out.indices[s]));
    }
    out.residual_norm = static_cast<float>((target - fit).norm());
    return out;
}

/// L_V(θ) − L_V(θ') on the given (already perturbed) validation batch, where
/// θ' moves only the final dense layer by −eta·candidate_grad.
template <class T>
T glister_gain(std::span<const T> candidate_grad, const BasicTensor<T>& val_inputs, std::span<const int> val_labels,
               const BasicParamSet<T>& params, const ModelSpec& spec, T eta) {
    if (!(eta > T{0})) throw InvalidArgument("glister eta must be > 0");
    const std::size_t K = spec.class_count(), F = spec.feature_width();
    if (candidate_grad.size() != K * (F + 1))
        throw ShapeError("candidate_grad", "expected length " + std::to_string(K * (F + 1)));
    const auto objective = ce_objective<T>();
    const T base = evaluate_loss(params, spec, Batch<T>{val_inputs, val_labels}, objective).value;
    BasicParamSet<T> moved = params;
    auto& w = moved[moved.size() - 2].tensor.values;
    auto& b = moved[moved.size() - 1].tensor.values;
    for (std::size_t i = 0; i < K * F; ++i) w[i] -= eta * candidate_grad[i];
    for (std::size_t c = 0; c < K; ++c) b[c] -= eta * candidate_grad[K * F + c];
    return base - evaluate_loss(moved, spec, Batch<T>{val_inputs, val_labels}, objective).value;
}

struct GlisterResult {
    std::vector<std::size_t> picks;  // in pick order
    double base_loss = 0.0;
    double final_loss = 0.0;
};

namespace select_detail {

inline double mean_ce(const Eigen::MatrixXd& z, std::span<const int> labels) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double mx = z.row(i).maxCoeff();
        const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
        total += lse - z(i, labels[static_cast<std::size_t>(i)]);
    }
    return total / static_cast<double>(z.rows());
}

} // namespace select_detail

/// Greedy maximization of the validation-loss reduction. `val_logits` are
/// the current logits on the perturbed validation set; `shifts[i]` is the
/// change in those logits per unit step along candidate i's final-layer
/// gradient. Each pick is applied to the hypothetical logits before the next.
inline GlisterResult glister_greedy(const Eigen::MatrixXd& val_logits, std::span<const int> val_labels,
                                    const std::vector<Eigen::MatrixXd>& shifts, std::size_t k, double eta) {
    if (k > shifts.size()) throw InvalidArgument("glister: k exceeds candidate count");
    GlisterResult out;
    Eigen::MatrixXd z = val_logits;
    out.base_loss = select_detail::mean_ce(z, val_labels);
    double current = out.base_loss;
    std::vector<char> used(shifts.size(), 0);
    for (std::size_t step = 0; step < k; ++step) {
        std::size_t best = shifts.size();
        double best_gain = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < shifts.size(); ++i) {
            if (used[i]) continue;
            const double gain = current - select_detail::mean_ce(z - eta * shifts[i], val_labels);
            if (gain > best_gain) {
                best_gain = gain;
                best = i;
            }
        }
        used[best] = 1;
        out.picks.push_back(best);
        z -= eta * shifts[best];
        current = select_detail::mean_ce(z, val_labels);
    }
    out.final_loss = current;
    return out;
}

namespace select_detail {

/// PGD over the whole set in fixed-size chunks, one derived seed per chunk.
inline Tensor perturb_all(const ParamSet& params, const ModelSpec& spec, const Dataset& data,
                          const Objective<float>& objective, const AttackSpec& attack, std::uint64_t seed,
                          std::size_t chunk = 256) {
    Tensor out = data.inputs;
    const std::size_t n = data.size();
    for (std::size_t b = 0; b < n; b += chunk) {
        const std::size_t e = std::min(n, b + chunk);
        const auto x = slice_rows(data.inputs, b, e);
        const std::span<const int> y(data.labels.data() + b, e - b);
        const auto adv = pgd_attack(params, spec, x, y, objective, attack, derive_seed(seed, {b}));
        std::copy(adv.values.begin(), adv.values.end(), out.values.begin() + static_cast<std::ptrdiff_t>(b * x.row_size()));
    }
    return out;
}

inline Eigen::MatrixXd to_matrix(const Tensor& t) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.row_size()));
    for (std::size_t i = 0; i < t.dim(0); ++i)
        for (std::size_t j = 0; j < t.row_size(); ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.values[i * t.row_size() + j];
    return m;
}

} // namespace select_detail

/// Weighted subset whose summed adversarial final-layer gradient matches the
/// full-data one, found by OMP. Slots OMP leaves empty (early convergence)
/// are filled with random unpicked indices at unit weight.
inline SubsetSelection select_adv_gradmatch(const ParamSet& params, const ModelSpec& spec, const Dataset& train,
                                            const LossConfig& loss, const SelectorConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t n = train.size(), k = cfg.subset_size(n);
    const auto adv = select_detail::perturb_all(params, spec, train, attack_objective<float>(loss), cfg.selection_attack,
                                                derive_seed(seed, {0x5e1a}));
    const auto grads = last_layer_gradients(params, spec, adv, train.labels, training_objective<float>(loss), &train.inputs);
    const Eigen::MatrixXd columns = select_detail::to_matrix(grads).transpose();
    Eigen::VectorXd target = Eigen::VectorXd::Zero(columns.rows());
    for (Eigen::Index j = 0; j < columns.cols(); ++j) target += columns.col(j);

    if (k == n) {
        // Unit weights on every example reproduce the target exactly.
        auto s = SubsetSelection::all(n);
        s.objective = (columns.rowwise().sum() - target).norm();
        s.select_seconds = select_detail::seconds_since(t0);
        return s;
    }
    const auto omp = omp_solve(columns, target, k, cfg.omp_lambda, cfg.omp_tol * target.norm());
    std::vector<std::size_t> idx = omp.indices;
    std::vector<float> w;
    for (double x : omp.weights) w.push_back(static_cast<float>(x));
    if (idx.size() < k) {
        std::vector<char> used(n, 0);
        for (auto i : idx) used[i] = 1;
        std::vector<std::size_t> rest;
        for (std::size_t i = 0; i < n; ++i)
            if (!used[i]) rest.push_back(i);
        const auto fill = select_random(rest.size(), k - idx.size(), derive_seed(seed, {0xf111}));
        for (auto f : fill.indices) {
            idx.push_back(rest[f]);
            w.push_back(1.0f);
        }
    }
    auto s = select_detail::sorted_selection(std::move(idx), std::move(w));
    s.objective = omp.residual_norm;
    s.warning = omp.warning;
    s.select_seconds = select_detail::seconds_since(t0);
    return s;
}

/// Greedy subset that most reduces the adversarial validation loss under a
/// one-step final-layer update. Unit weights.
inline SubsetSelection select_adv_glister(const ParamSet& params, const ModelSpec& spec, const Dataset& train,
                                          const Dataset& val, const LossConfig& loss, const SelectorConfig& cfg,
                                          std::uint64_t seed) {
    cfg.validate();
    if (val.empty()) throw InvalidArgument("glister selection needs a non-empty validation set");
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t n = train.size(), k = cfg.subset_size(n), K = spec.class_count(), F = spec.feature_width();

    const auto val_adv = select_detail::perturb_all(params, spec, val, ce_objective<float>(), cfg.selection_attack,
                                                    derive_seed(seed, {0x7a1}));
    const auto vf = forward_with_features(params, spec, val_adv);
    const auto train_adv = select_detail::perturb_all(params, spec, train, attack_objective<float>(loss),
                                                      cfg.selection_attack, derive_seed(seed, {0x5e1a}));
    const auto grads = last_layer_gradients(params, spec, train_adv, train.labels, training_objective<float>(loss),
                                            &train.inputs);

    const auto V = static_cast<Eigen::Index>(val.size());
    Eigen::MatrixXd feat1(V, static_cast<Eigen::Index>(F + 1));
    feat1.leftCols(static_cast<Eigen::Index>(F)) = select_detail::to_matrix(vf.features);
    feat1.col(static_cast<Eigen::Index>(F)).setOnes();
    std::vector<Eigen::MatrixXd> shifts(n);
    for (std::size_t i = 0; i < n; ++i) {
        Eigen::MatrixXd gi(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(F + 1));
        const float* row = grads.values.data() + i * K * (F + 1);
        for (std::size_t c = 0; c < K; ++c) {
            for (std::size_t j = 0; j < F; ++j) gi(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(j)) = row[c * F + j];
            gi(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(F)) = row[K * F + c];
        }
        shifts[i] = feat1 * gi.transpose();
    }
    const auto greedy = glister_greedy(select_detail::to_matrix(vf.logits), val.labels, shifts, k, cfg.glister_eta);
    auto s = select_detail::sorted_selection(greedy.picks, std::vector<float>(k, 1.0f));
    s.objective = greedy.final_loss;
    s.select_seconds = select_detail::seconds_since(t0);
    return s;
}

/// Dispatches on cfg.kind. `full` returns every index with unit weight.
inline SubsetSelection select_subset(const ParamSet& params, const ModelSpec& spec, const Dataset& train,
                                     const Dataset& val, const LossConfig& loss, const SelectorConfig& cfg,
                                     std::uint64_t seed) {
    switch (cfg.kind) {
    case SelectorKind::full: return SubsetSelection::all(train.size());
    case SelectorKind::random: {
        const auto t0 = std::chrono::steady_clock::now();
        auto s = select_random(train.size(), cfg.subset_size(train.size()), seed);
        s.select_seconds = select_detail::seconds_since(t0);
        return s;
    }
    case SelectorKind::glister: return select_adv_glister(params, spec, train, val, loss, cfg, seed);
    case SelectorKind::gradmatch: return select_adv_gradmatch(params, spec, train, loss, cfg, seed);
    }
    throw InvalidArgument("unknown selector kind");
}

} // namespace advprune
