#pragma once

#include <charconv>
#include <ostream>
#include <string>

namespace advprune {

/// Shortest decimal text that parses back to exactly `v`.
inline std::string csv_number(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string csv_number(float v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

} // namespace advprune
