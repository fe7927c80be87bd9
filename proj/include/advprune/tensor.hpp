#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "advprune/error.hpp"

namespace advprune {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
    out << ']';
    return out.str();
}

/// Dense row-major tensor. The leading dimension is the batch dimension
/// wherever a tensor holds examples.
template <class T>
struct BasicTensor {
    Shape shape;
    std::vector<T> values;

    BasicTensor() = default;

    explicit BasicTensor(Shape s, T fill = T{0}) : shape(std::move(s)), values(element_count(shape), fill) {}

    BasicTensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
        if (values.size() != element_count(shape))
            throw ShapeError("tensor", "shape " + shape_string(shape) + " needs " +
                                           std::to_string(element_count(shape)) + " values, got " +
                                           std::to_string(values.size()));
    }

    std::size_t size() const noexcept { return values.size(); }
    std::size_t rank() const noexcept { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    bool empty() const noexcept { return values.empty(); }

    T& operator[](std::size_t i) { return values[i]; }
    const T& operator[](std::size_t i) const { return values[i]; }

    /// Number of scalars per leading-dimension slice.
    std::size_t row_size() const { return shape.empty() || shape[0] == 0 ? 0 : values.size() / shape[0]; }

    std::span<T> row(std::size_t i) { return std::span<T>(values).subspan(i * row_size(), row_size()); }
    std::span<const T> row(std::size_t i) const {
        return std::span<const T>(values).subspan(i * row_size(), row_size());
    }

    template <class U>
    BasicTensor<U> cast() const {
        BasicTensor<U> out;
        out.shape = shape;
        out.values.assign(values.begin(), values.end());
        return out;
    }

    bool all_finite() const {
        return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const BasicTensor&, const BasicTensor&) = default;
};

using Tensor = BasicTensor<float>;

/// Copy the rows named by `indices` (leading dimension) into a new tensor.
template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& src, std::span<const std::size_t> indices) {
    Shape shape = src.shape;
    shape.at(0) = indices.size();
    BasicTensor<T> out(shape);
    const std::size_t stride = src.row_size();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= src.dim(0))
            throw InvalidArgument("row index " + std::to_string(indices[i]) + " out of range " +
                                  std::to_string(src.dim(0)));
        std::copy_n(src.values.begin() + static_cast<std::ptrdiff_t>(indices[i] * stride), stride,
                    out.values.begin() + static_cast<std::ptrdiff_t>(i * stride));
    }
    return out;
}

template <class T>
BasicTensor<T> slice_rows(const BasicTensor<T>& src, std::size_t begin, std::size_t end) {
    Shape shape = src.shape;
    shape.at(0) = end - begin;
    const std::size_t stride = src.row_size();
    return BasicTensor<T>(shape, std::vector<T>(src.values.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                                src.values.begin() + static_cast<std::ptrdiff_t>(end * stride)));
}

/// Scatter `rows` back into `dst` at `indices`.
template <class T>
void scatter_rows(BasicTensor<T>& dst, std::span<const std::size_t> indices, const BasicTensor<T>& rows) {
    const std::size_t stride = dst.row_size();
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy_n(rows.values.begin() + static_cast<std::ptrdiff_t>(i * stride), stride,
                    dst.values.begin() + static_cast<std::ptrdiff_t>(indices[i] * stride));
}

} // namespace advprune
