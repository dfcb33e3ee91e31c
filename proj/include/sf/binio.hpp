#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

namespace sf {

/// float32 arrays as little-endian bytes regardless of host order.
inline void write_f32_le(std::ostream& out, std::span<const float> values) {
    std::vector<char> buf(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) {
            buf[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xffu);
        }
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

/// Reads `n` values; returns an empty vector when the stream runs short.
inline std::vector<float> read_f32_le(std::istream& in, std::size_t n) {
    std::vector<char> buf(n * 4);
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) {
        return {};
    }
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[i * 4 + b])) << (8 * b);
        }
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

}  // namespace sf
