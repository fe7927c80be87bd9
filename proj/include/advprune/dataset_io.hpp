#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "advprune/binary_io.hpp"
#include "advprune/data.hpp"
#include "advprune/error.hpp"
#include "advprune/rng.hpp"

namespace advprune {

// Dataset file layout (little-endian):
//   "ADVPDATA" | u32 version (1) | u32 n | u32 rank | rank×u32 feature dims | u32 classes
//   | n·prod(dims) f32 features, row-major, in [0,1] | n i32 labels in [0, classes)
inline constexpr char kDatasetMagic[8] = {'A', 'D', 'V', 'P', 'D', 'A', 'T', 'A'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(const std::string& path, const Dataset& data) {
    data.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DatasetError(DatasetError::Kind::io, "cannot open " + path + " for writing");
    out.write(kDatasetMagic, 8);
    binio::put_u32(out, kDatasetVersion);
    binio::put_u32(out, static_cast<std::uint32_t>(data.size()));
    const auto fs = data.feature_shape();
    binio::put_u32(out, static_cast<std::uint32_t>(fs.size()));
    for (auto d : fs) binio::put_u32(out, static_cast<std::uint32_t>(d));
    binio::put_u32(out, static_cast<std::uint32_t>(data.classes));
    for (float v : data.inputs.values) binio::put_f32(out, v);
    for (int y : data.labels) binio::put_i32(out, y);
    if (!out) throw DatasetError(DatasetError::Kind::io, "failed writing " + path);
}

inline Dataset load_dataset(const std::string& path) {
    using K = DatasetError::Kind;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError(K::io, "cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || !std::equal(magic, magic + 8, kDatasetMagic)) throw DatasetError(K::malformed_header, "bad magic");
    std::uint32_t version, n, rank, classes;
    if (!binio::get_u32(in, version) || version != kDatasetVersion)
        throw DatasetError(K::malformed_header, "unsupported version");
    if (!binio::get_u32(in, n) || n == 0) throw DatasetError(K::malformed_header, "example count must be > 0");
    if (!binio::get_u32(in, rank) || rank == 0 || rank > 4) throw DatasetError(K::malformed_header, "feature rank must be 1..4");
    Shape shape{n};
    std::uint64_t row = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint32_t d;
        if (!binio::get_u32(in, d) || d == 0) throw DatasetError(K::malformed_header, "feature dimension must be > 0");
        shape.push_back(d);
        row *= d;
        if (row > (1u << 24)) throw DatasetError(K::malformed_header, "feature row too large");
    }
    if (!binio::get_u32(in, classes) || classes < 2 || classes > (1u << 16))
        throw DatasetError(K::malformed_header, "class count must be >= 2");

    Dataset d;
    d.classes = classes;
    d.inputs = Tensor(shape);
    for (std::size_t i = 0; i < d.inputs.size(); ++i) {
        float v;
        if (!binio::get_f32(in, v))
            throw DatasetError(K::truncated_payload, "features end after " + std::to_string(i) + " values");
        if (!(v >= 0.0f && v <= 1.0f))
            throw DatasetError(K::value_out_of_range, "feature " + std::to_string(i) + " = " + std::to_string(v));
        d.inputs.values[i] = v;
    }
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::int32_t y;
        if (!binio::get_i32(in, y))
            throw DatasetError(K::truncated_payload, "labels end after " + std::to_string(i) + " values");
        if (y < 0 || static_cast<std::uint32_t>(y) >= classes)
            throw DatasetError(K::label_out_of_range, "label " + std::to_string(y) + " at row " + std::to_string(i));
        d.labels[i] = y;
    }
    if (in.peek() != std::char_traits<char>::eof()) throw DatasetError(K::trailing_bytes, path);
    return d;
}

/// Shuffles row indices under `seed`; the first round(val_fraction·n) go to
/// validation. Both parts keep the original row order.
inline std::pair<Dataset, Dataset> split_train_val(const Dataset& data, double val_fraction, std::uint64_t seed) {
    if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw InvalidArgument("val_fraction must be in [0,1)");
    const std::size_t n = data.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(std::span<std::size_t>(idx));
    const auto m = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m));
    std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end());
    std::sort(val.begin(), val.end());
    std::sort(train.begin(), train.end());
    Dataset v = data.subset(val);
    if (val.empty()) {
        Shape s = data.inputs.shape;
        s[0] = 0;
        v.inputs = Tensor(s);
    }
    return {data.subset(train), std::move(v)};
}

enum class ToyKind { two_gaussians, spiral, checkerboard, bars };

inline ToyKind parse_toy_kind(const std::string& s) {
    if (s == "two_gaussians") return ToyKind::two_gaussians;
    if (s == "spiral") return ToyKind::spiral;
    if (s == "checkerboard") return ToyKind::checkerboard;
    if (s == "bars") return ToyKind::bars;
    throw InvalidArgument("unknown toy dataset kind '" + s + "'");
}

inline std::string to_string(ToyKind k) {
    switch (k) {
    case ToyKind::two_gaussians: return "two_gaussians";
    case ToyKind::spiral: return "spiral";
    case ToyKind::checkerboard: return "checkerboard";
    case ToyKind::bars: return "bars";
    }
    return "?";
}

/// Balanced two-class toy data with features in [0,1].
///   two_gaussians: centres (0.3,0.3) and (0.7,0.7), per-axis sd 0.05 + noise,
///                  draws truncated at 3 sd (separable when noise = 0).
///   spiral:        two interleaved 1.5-turn spirals, Gaussian jitter `noise`.
///   checkerboard:  4×4 board on the unit square, jitter `noise` after labelling.
///   bars:          1×side×side images, a bright horizontal (class 0) or
///                  vertical (class 1) bar on a dim background, pixel noise `noise`.
inline Dataset generate_toy_dataset(ToyKind kind, std::size_t n, double noise, std::uint64_t seed, std::size_t side = 12) {
    if (n < 10) throw InvalidArgument("toy datasets need n >= 10");
    if (!(noise >= 0.0)) throw InvalidArgument("noise must be >= 0");
    Rng rng(seed);
    Dataset d;
    d.classes = 2;
    d.labels.resize(n);
    auto clamp01 = [](double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); };

    if (kind == ToyKind::bars) {
        if (side < 8) throw InvalidArgument("bars images need side >= 8");
        d.inputs = Tensor({n, 1, side, side});
        for (std::size_t i = 0; i < n; ++i) {
            const int y = static_cast<int>(i % 2);
            d.labels[i] = y;
            float* img = d.inputs.values.data() + i * side * side;
            const std::size_t pos = 1 + rng.below(side - 2);
            const double level = rng.uniform(0.7, 1.0);
            for (std::size_t r = 0; r < side; ++r)
                for (std::size_t c = 0; c < side; ++c) {
                    const bool on = y == 0 ? r == pos : c == pos;
                    const double base = on ? level : rng.uniform(0.0, 0.2);
                    img[r * side + c] = clamp01(base + noise * rng.normal());
                }
        }
        return d;
    }

    d.inputs = Tensor({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        const int y = static_cast<int>(i % 2);
        d.labels[i] = y;
        double px = 0.0, py = 0.0;
        switch (kind) {
        case ToyKind::two_gaussians: {
            const double c = y == 0 ? 0.3 : 0.7, sd = 0.05 + noise;
            auto draw = [&] {
                double z = rng.normal();
                while (std::abs(z) > 3.0) z = rng.normal();
                return z;
            };
            px = c + sd * draw();
            py = c + sd * draw();
            break;
        }
        case ToyKind::spiral: {
            const double t = rng.uniform01();
            const double r = 0.05 + 0.4 * t;
            const double a = 3.0 * std::numbers::pi * t + std::numbers::pi * y;
            px = 0.5 + r * std::cos(a) + noise * rng.normal();
            py = 0.5 + r * std::sin(a) + noise * rng.normal();
            break;
        }
        case ToyKind::checkerboard: {
            for (;;) {
                px = rng.uniform01();
                py = rng.uniform01();
                const int cell = static_cast<int>(px * 4.0) + static_cast<int>(py * 4.0);
                if (cell % 2 == y) break;
            }
            px += noise * rng.normal();
            py += noise * rng.normal();
            break;
        }
        case ToyKind::bars: break;
        }
        d.inputs.values[2 * i] = clamp01(px);
        d.inputs.values[2 * i + 1] = clamp01(py);
    }
    return d;
}

inline Dataset generate_toy_dataset(ToyKind kind, std::size_t n, double noise, std::uint64_t seed,
                                    const std::string& path, std::size_t side = 12) {
    auto d = generate_toy_dataset(kind, n, noise, seed, side);
    save_dataset(path, d);
    return d;
}

} // namespace advprune
