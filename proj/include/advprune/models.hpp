#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "advprune/binary_io.hpp"
#include "advprune/diffcore.hpp"
#include "advprune/error.hpp"
#include "advprune/rng.hpp"
#include "advprune/tape.hpp"

namespace advprune {

enum class ModelKind { mlp, tiny_cnn };

inline std::string to_string(ModelKind k) { return k == ModelKind::mlp ? "mlp" : "tiny_cnn"; }

inline ModelKind parse_model_kind(const std::string& s) {
    if (s == "mlp") return ModelKind::mlp;
    if (s == "tiny_cnn") return ModelKind::tiny_cnn;
    throw InvalidArgument("unknown model kind '" + s + "'");
}

/// Architecture description. For an MLP, `hidden` lists the widths of the
/// ReLU layers; for the tiny CNN it lists the channels of the two 3×3
/// convolutions, each followed by ReLU and 2×2 max pooling. Both end in a
/// dense layer to `classes` logits.
struct ModelSpec {
    ModelKind kind = ModelKind::mlp;
    Shape input_shape{2};
    std::vector<std::size_t> hidden{64, 64};
    std::size_t classes = 2;

    static ModelSpec mlp(std::size_t inputs, std::size_t classes, std::vector<std::size_t> hidden = {64, 64}) {
        return {ModelKind::mlp, {inputs}, std::move(hidden), classes};
    }

    static ModelSpec tiny_cnn(std::size_t channels, std::size_t side, std::size_t classes,
                              std::vector<std::size_t> conv_channels = {16, 32}) {
        return {ModelKind::tiny_cnn, {channels, side, side}, std::move(conv_channels), classes};
    }

    void validate() const {
        if (classes < 2) throw InvalidArgument("model needs at least 2 classes");
        if (kind == ModelKind::mlp) {
            if (input_shape.size() != 1 || input_shape[0] == 0)
                throw InvalidArgument("mlp input shape must be [features], got " + shape_string(input_shape));
            for (auto h : hidden)
                if (h == 0) throw InvalidArgument("mlp hidden width must be positive");
        } else {
            if (input_shape.size() != 3 || input_shape[1] != input_shape[2] || input_shape[1] < 8 || input_shape[0] == 0)
                throw InvalidArgument("tiny_cnn input must be [C,S,S] with S >= 8, got " + shape_string(input_shape));
            if (hidden.size() != 2 || hidden[0] == 0 || hidden[1] == 0)
                throw InvalidArgument("tiny_cnn needs exactly two positive channel counts");
        }
    }

    /// Width of the features that feed the final dense layer.
    std::size_t feature_width() const {
        if (kind == ModelKind::mlp) return hidden.empty() ? input_shape[0] : hidden.back();
        const std::size_t side = (input_shape[1] / 2) / 2;
        return hidden[1] * side * side;
    }

    /// Parameter names and shapes in ParamSet order.
    std::vector<std::pair<std::string, Shape>> layout() const {
        std::vector<std::pair<std::string, Shape>> out;
        if (kind == ModelKind::mlp) {
            std::size_t in = input_shape[0];
            for (std::size_t i = 0; i < hidden.size(); ++i) {
                const std::string layer = "fc" + std::to_string(i + 1);
                out.push_back({layer + ".weight", {hidden[i], in}});
                out.push_back({layer + ".bias", {hidden[i]}});
                in = hidden[i];
            }
            const std::string layer = "fc" + std::to_string(hidden.size() + 1);
            out.push_back({layer + ".weight", {classes, in}});
            out.push_back({layer + ".bias", {classes}});
        } else {
            out.push_back({"conv1.weight", {hidden[0], input_shape[0], 3, 3}});
            out.push_back({"conv1.bias", {hidden[0]}});
            out.push_back({"conv2.weight", {hidden[1], hidden[0], 3, 3}});
            out.push_back({"conv2.bias", {hidden[1]}});
            out.push_back({"fc.weight", {classes, feature_width()}});
            out.push_back({"fc.bias", {classes}});
        }
        return out;
    }

    std::size_t class_count() const { return classes; }

    template <class T>
    void check_params(const BasicParamSet<T>& params) const {
        const auto expected = layout();
        if (params.size() != expected.size())
            throw ShapeError("params", "expected " + std::to_string(expected.size()) + " tensors, got " +
                                           std::to_string(params.size()));
        for (std::size_t i = 0; i < expected.size(); ++i)
            if (params[i].name != expected[i].first || params[i].tensor.shape != expected[i].second)
                throw ShapeError(params[i].name, "expected " + expected[i].first + " " +
                                                     shape_string(expected[i].second) + ", got " +
                                                     shape_string(params[i].tensor.shape));
    }

    void check_inputs(const Shape& shape) const {
        const bool ok = shape.size() == input_shape.size() + 1 &&
                        std::equal(input_shape.begin(), input_shape.end(), shape.begin() + 1);
        if (!ok)
            throw ShapeError("inputs", "expected [B]+" + shape_string(input_shape) + ", got " + shape_string(shape));
    }

    /// Records the network on `tape`; optionally reports the penultimate
    /// feature node.
    template <class T>
    Var forward(Tape<T>& tape, std::span<const Var> p, Var x, Var* features = nullptr) const {
        Var h = x;
        std::size_t next = 0;
        if (kind == ModelKind::mlp) {
            for (std::size_t i = 0; i < hidden.size(); ++i, next += 2)
                h = tape.relu(tape.add_bias(tape.matmul_nt(h, p[next]), p[next + 1]));
        } else {
            h = tape.max_pool2(tape.relu(tape.add_bias(tape.conv2d(h, p[0]), p[1])));
            h = tape.max_pool2(tape.relu(tape.add_bias(tape.conv2d(h, p[2]), p[3])));
            h = tape.flatten(h);
            next = 4;
        }
        if (features) *features = h;
        return tape.add_bias(tape.matmul_nt(h, p[next]), p[next + 1]);
    }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Fan-in scaled uniform weights, U(−√(6/fan_in), √(6/fan_in)); zero biases.
inline ParamSet init_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(derive_seed(seed, {0x1417}));
    ParamSet params;
    for (auto& [name, shape] : spec.layout()) {
        Tensor t(shape);
        if (shape.size() > 1) {
            const std::size_t fan_in = t.size() / shape[0];
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            for (auto& v : t.values) v = static_cast<float>(rng.uniform(-bound, bound));
        }
        params.add(name, std::move(t));
    }
    return params;
}

template <class T>
struct ForwardResult {
    BasicTensor<T> logits;
    BasicTensor<T> features;
};

template <class T>
ForwardResult<T> forward_with_features(const BasicParamSet<T>& params, const ModelSpec& spec,
                                       const BasicTensor<T>& inputs) {
    spec.check_params(params);
    spec.check_inputs(inputs.shape);
    Tape<T> tape;
    std::vector<Var> pv;
    for (const auto& p : params) pv.push_back(tape.input(p.tensor, false));
    Var feat;
    const Var logits = spec.forward(tape, pv, tape.input(inputs, false), &feat);
    return {tape.value(logits), tape.value(feat)};
}

template <class T>
BasicTensor<T> forward_logits(const BasicParamSet<T>& params, const ModelSpec& spec, const BasicTensor<T>& inputs) {
    auto logits = forward_with_features(params, spec, inputs).logits;
    if (!logits.all_finite()) throw NonFiniteError("non-finite logits");
    return logits;
}

/// Row-wise argmax; ties go to the lowest class index.
template <class T>
std::vector<int> argmax_rows(const BasicTensor<T>& logits) {
    std::vector<int> out(logits.dim(0));
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (logits.values[i * k + c] > logits.values[i * k + best]) best = c;
        out[i] = static_cast<int>(best);
    }
    return out;
}

template <class T>
std::vector<int> predict(const BasicParamSet<T>& params, const ModelSpec& spec, const BasicTensor<T>& inputs) {
    return argmax_rows(forward_logits(params, spec, inputs));
}

// Checkpoint layout (little-endian):
//   "ADVPCKPT" | u32 kind | u32 rank, rank×u32 input dims | u32 n_hidden, n_hidden×u32 | u32 classes
//   | u32 n_tensors | per tensor: u32 name_len, name, u32 rank, rank×u32 dims, f32 values
inline constexpr char kCheckpointMagic[8] = {'A', 'D', 'V', 'P', 'C', 'K', 'P', 'T'};

inline void save_checkpoint(const std::string& path, const ModelSpec& spec, const ParamSet& params) {
    spec.check_params(params);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open checkpoint for writing: " + path);
    out.write(kCheckpointMagic, 8);
    binio::put_u32(out, static_cast<std::uint32_t>(spec.kind));
    binio::put_u32(out, static_cast<std::uint32_t>(spec.input_shape.size()));
    for (auto d : spec.input_shape) binio::put_u32(out, static_cast<std::uint32_t>(d));
    binio::put_u32(out, static_cast<std::uint32_t>(spec.hidden.size()));
    for (auto h : spec.hidden) binio::put_u32(out, static_cast<std::uint32_t>(h));
    binio::put_u32(out, static_cast<std::uint32_t>(spec.classes));
    binio::put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        binio::put_string(out, p.name);
        binio::put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
        for (auto d : p.tensor.shape) binio::put_u32(out, static_cast<std::uint32_t>(d));
        for (float v : p.tensor.values) binio::put_f32(out, v);
    }
    if (!out) throw Error("failed writing checkpoint: " + path);
}

struct Checkpoint {
    ModelSpec spec;
    ParamSet params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint: " + path);
    auto fail = [&](const std::string& what) { return Error("bad checkpoint " + path + ": " + what); };
    char magic[8];
    if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic)) throw fail("magic");
    std::uint32_t kind, rank, n_hidden, classes, n_tensors;
    if (!binio::get_u32(in, kind) || kind > 1 || !binio::get_u32(in, rank) || rank > 8) throw fail("header");
    Checkpoint ck;
    ck.spec.kind = static_cast<ModelKind>(kind);
    ck.spec.input_shape.resize(rank);
    for (auto& d : ck.spec.input_shape) {
        std::uint32_t v;
        if (!binio::get_u32(in, v)) throw fail("header");
        d = v;
    }
    if (!binio::get_u32(in, n_hidden) || n_hidden > 64) throw fail("header");
    ck.spec.hidden.resize(n_hidden);
    for (auto& h : ck.spec.hidden) {
        std::uint32_t v;
        if (!binio::get_u32(in, v)) throw fail("header");
        h = v;
    }
    if (!binio::get_u32(in, classes) || !binio::get_u32(in, n_tensors)) throw fail("header");
    ck.spec.classes = classes;
    ck.spec.validate();
    for (std::uint32_t t = 0; t < n_tensors; ++t) {
        std::string name;
        std::uint32_t trank;
        if (!binio::get_string(in, name) || !binio::get_u32(in, trank) || trank > 8) throw fail("tensor header");
        Shape shape(trank);
        for (auto& d : shape) {
            std::uint32_t v;
            if (!binio::get_u32(in, v)) throw fail("tensor header");
            d = v;
        }
        Tensor tensor(shape);
        for (auto& v : tensor.values)
            if (!binio::get_f32(in, v)) throw fail("truncated tensor '" + name + "'");
        ck.params.add(name, std::move(tensor));
    }
    ck.spec.check_params(ck.params);
    return ck;
}

} // namespace advprune
