#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "advprune/error.hpp"
#include "advprune/tensor.hpp"

namespace advprune {

/// Labelled examples held in memory. inputs is [n, ...feature_shape].
struct Dataset {
    Tensor inputs;
    std::vector<int> labels;
    std::size_t classes = 2;

    std::size_t size() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }

    Shape feature_shape() const { return Shape(inputs.shape.begin() + 1, inputs.shape.end()); }

    void validate() const {
        if (inputs.rank() < 2 || inputs.dim(0) != labels.size())
            throw ShapeError("dataset", "inputs " + shape_string(inputs.shape) + " with " +
                                            std::to_string(labels.size()) + " labels");
        for (int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= classes)
                throw InvalidArgument("label " + std::to_string(y) + " outside [0," + std::to_string(classes) + ")");
    }

    Dataset subset(std::span<const std::size_t> indices) const {
        Dataset out;
        out.inputs = gather_rows(inputs, indices);
        out.labels.reserve(indices.size());
        for (auto i : indices) out.labels.push_back(labels.at(i));
        out.classes = classes;
        return out;
    }

    friend bool operator==(const Dataset&, const Dataset&) = default;
};

} // namespace advprune
