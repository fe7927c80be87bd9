#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace advprune {

/// Base of every error raised by the library. Carries a human-readable message.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A tensor does not have the shape an operation expects.
class ShapeError : public Error {
public:
    ShapeError(std::string tensor, const std::string& detail)
        : Error("shape mismatch in '" + tensor + "': " + detail), tensor_(std::move(tensor)) {}

    const std::string& tensor() const noexcept { return tensor_; }

private:
    std::string tensor_;
};

/// A loss or gradient evaluated to NaN or infinity.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

class DatasetError : public Error {
public:
    enum class Kind { io, malformed_header, truncated_payload, trailing_bytes, label_out_of_range, value_out_of_range };

    DatasetError(Kind kind, const std::string& detail) : Error(prefix(kind) + detail), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    static std::string prefix(Kind kind) {
        switch (kind) {
        case Kind::io: return "dataset i/o error: ";
        case Kind::malformed_header: return "malformed dataset header: ";
        case Kind::truncated_payload: return "truncated dataset payload: ";
        case Kind::trailing_bytes: return "unexpected trailing bytes in dataset: ";
        case Kind::label_out_of_range: return "dataset label out of range: ";
        case Kind::value_out_of_range: return "dataset feature out of [0,1]: ";
        }
        return "dataset error: ";
    }

    Kind kind_;
};

/// Configuration key is unknown or its value does not parse.
class ConfigError : public Error {
public:
    ConfigError(std::string key, const std::string& detail)
        : Error("config key '" + key + "': " + detail), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    DivergenceError(std::size_t epoch, std::size_t batch, const std::string& detail = "non-finite loss")
        : Error("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ": " +
                detail),
          epoch_(epoch), batch_(batch) {}

    std::size_t epoch() const noexcept { return epoch_; }
    std::size_t batch() const noexcept { return batch_; }

private:
    std::size_t epoch_;
    std::size_t batch_;
};

} // namespace advprune
