#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "advprune/attacks.hpp"
#include "advprune/data.hpp"
#include "advprune/error.hpp"
#include "advprune/models.hpp"

namespace advprune {

enum class ExampleCategory : std::uint8_t { outlier, boundary, robust };

inline std::string to_string(ExampleCategory c) {
    switch (c) {
    case ExampleCategory::outlier: return "outlier";
    case ExampleCategory::boundary: return "boundary";
    case ExampleCategory::robust: return "robust";
    }
    return "?";
}

struct CategoryCounts {
    std::size_t outlier = 0;
    std::size_t boundary = 0;
    std::size_t robust = 0;

    std::size_t total() const noexcept { return outlier + boundary + robust; }
    friend bool operator==(const CategoryCounts&, const CategoryCounts&) = default;
};

struct Categorization {
    std::vector<ExampleCategory> categories;
    CategoryCounts counts;
};

/// Outlier: wrong on the clean input. Boundary: right clean, wrong after the
/// probe attack. Robust: right in both cases.
inline Categorization categorize_examples(const ParamSet& params, const ModelSpec& spec, const Dataset& data,
                                          const AttackSpec& probe, std::uint64_t seed, std::size_t batch_size = 256) {
    probe.validate();
    Categorization out;
    out.categories.resize(data.size());
    const auto objective = ce_objective<float>();
    for (std::size_t b = 0; b < data.size(); b += batch_size) {
        const std::size_t e = std::min(data.size(), b + batch_size);
        const auto x = slice_rows(data.inputs, b, e);
        const std::span<const int> y(data.labels.data() + b, e - b);
        const auto clean = predict(params, spec, x);
        const auto adv = predict(params, spec, pgd_attack(params, spec, x, y, objective, probe, derive_seed(seed, {b})));
        for (std::size_t i = 0; i < e - b; ++i) {
            ExampleCategory c = ExampleCategory::robust;
            if (clean[i] != y[i])
                c = ExampleCategory::outlier;
            else if (adv[i] != y[i])
                c = ExampleCategory::boundary;
            out.categories[b + i] = c;
        }
    }
    for (auto c : out.categories) {
        if (c == ExampleCategory::outlier) ++out.counts.outlier;
        if (c == ExampleCategory::boundary) ++out.counts.boundary;
        if (c == ExampleCategory::robust) ++out.counts.robust;
    }
    return out;
}

/// Training-attack steps per category.
struct BudgetPolicy {
    int outlier_steps = 0;
    int boundary_steps = 10;
    int robust_steps = 1;

    void validate() const {
        if (outlier_steps < 0 || boundary_steps < 0 || robust_steps < 0)
            throw InvalidArgument("bullet step counts must be >= 0");
    }

    int steps_for(ExampleCategory c) const {
        switch (c) {
        case ExampleCategory::outlier: return outlier_steps;
        case ExampleCategory::boundary: return boundary_steps;
        case ExampleCategory::robust: return robust_steps;
        }
        return boundary_steps;
    }

    friend bool operator==(const BudgetPolicy&, const BudgetPolicy&) = default;
};

/// Per-example copies of `base` with the step count set by category.
inline std::vector<AttackSpec> allocate_attack_budget(std::span<const ExampleCategory> categories,
                                                      const BudgetPolicy& policy, const AttackSpec& base) {
    policy.validate();
    std::vector<AttackSpec> out(categories.size(), base);
    for (std::size_t i = 0; i < categories.size(); ++i) out[i].steps = policy.steps_for(categories[i]);
    return out;
}

inline std::size_t total_attack_steps(std::span<const AttackSpec> budgets) {
    std::size_t n = 0;
    for (const auto& b : budgets) n += static_cast<std::size_t>(b.steps) * static_cast<std::size_t>(b.restarts);
    return n;
}

struct TrackingRow {
    std::size_t epoch = 0;
    CategoryCounts counts;
};

struct TrackingTable {
    std::vector<TrackingRow> rows;

    void write_csv(std::ostream& out) const {
        out << "epoch,n_outlier,n_boundary,n_robust\n";
        for (const auto& r : rows)
            out << r.epoch << ',' << r.counts.outlier << ',' << r.counts.boundary << ',' << r.counts.robust << '\n';
    }
};

/// One row per recorded epoch, numbered from 1. Every row must cover the
/// same probed-set size.
inline TrackingTable track_dynamics(std::span<const CategoryCounts> history) {
    if (history.empty()) throw InvalidArgument("tracking needs at least one recorded epoch");
    TrackingTable t;
    for (std::size_t e = 0; e < history.size(); ++e) {
        if (history[e].total() != history[0].total())
            throw InvalidArgument("epoch " + std::to_string(e + 1) + " probed " + std::to_string(history[e].total()) +
                                  " examples, expected " + std::to_string(history[0].total()));
        t.rows.push_back({e + 1, history[e]});
    }
    return t;
}

} // namespace advprune
