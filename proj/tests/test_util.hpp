#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "advprune/data.hpp"
#include "advprune/rng.hpp"
#include "advprune/tensor.hpp"

namespace testutil {

inline advprune::Tensor random_tensor(advprune::Shape shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    advprune::Rng rng(seed);
    advprune::Tensor t(std::move(shape));
    for (auto& v : t.values) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
    advprune::Rng rng(seed);
    std::vector<int> y(n);
    for (auto& v : y) v = static_cast<int>(rng.below(classes));
    return y;
}

/// Gradient-check comparison: passes when |a−b| <= 1e-6 or the relative
/// error |a−b| / max(|a|,|b|) <= rel. Returns the worst relative error
/// among elements that fail the absolute floor.
template <class A, class B>
double worst_relative_error(const std::vector<A>& a, const std::vector<B>& b, double abs_floor = 1e-6) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = static_cast<double>(a[i]), y = static_cast<double>(b[i]);
        const double diff = std::abs(x - y);
        if (diff <= abs_floor) continue;
        worst = std::max(worst, diff / std::max(std::abs(x), std::abs(y)));
    }
    return worst;
}

/// Two well-separated Gaussian blobs in [0,1]², balanced labels.
inline advprune::Dataset blobs(std::size_t n, double spread, std::uint64_t seed) {
    advprune::Rng rng(seed);
    advprune::Dataset d;
    d.classes = 2;
    d.inputs = advprune::Tensor({n, 2});
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int y = static_cast<int>(i % 2);
        const double c = y == 0 ? 0.3 : 0.7;
        d.labels[i] = y;
        d.inputs.values[2 * i] = static_cast<float>(std::clamp(c + spread * rng.normal(), 0.0, 1.0));
        d.inputs.values[2 * i + 1] = static_cast<float>(std::clamp(c + spread * rng.normal(), 0.0, 1.0));
    }
    return d;
}

} // namespace testutil
