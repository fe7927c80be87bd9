#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

namespace advprune::binio {

// Little-endian encoding regardless of host byte order.

inline void put_u32(std::ostream& out, std::uint32_t v) {
    const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                       static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

inline void put_i32(std::ostream& out, std::int32_t v) { put_u32(out, static_cast<std::uint32_t>(v)); }

inline void put_f32(std::ostream& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline void put_string(std::ostream& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline bool get_u32(std::istream& in, std::uint32_t& v) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
    v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
        (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    return true;
}

inline bool get_i32(std::istream& in, std::int32_t& v) {
    std::uint32_t u;
    if (!get_u32(in, u)) return false;
    v = static_cast<std::int32_t>(u);
    return true;
}

inline bool get_f32(std::istream& in, float& v) {
    std::uint32_t u;
    if (!get_u32(in, u)) return false;
    v = std::bit_cast<float>(u);
    return true;
}

inline bool get_string(std::istream& in, std::string& s, std::uint32_t max_len = 1u << 16) {
    std::uint32_t n;
    if (!get_u32(in, n) || n > max_len) return false;
    s.resize(n);
    return static_cast<bool>(in.read(s.data(), n));
}

} // namespace advprune::binio
