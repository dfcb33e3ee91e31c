#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace sf {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Stream seed for (master, tag...). A stream depends only on its tags, never
/// on how many other streams were drawn before it.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t h = splitmix64(master);
    for (std::uint64_t t : tags) {
        h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
    }
    return h;
}

inline Rng make_stream(std::uint64_t master, std::initializer_list<std::uint64_t> tags) {
    return Rng(derive_seed(master, tags));
}

// Purpose tags for derived streams.
namespace stream {
inline constexpr std::uint64_t labels = 1;
inline constexpr std::uint64_t image = 2;
inline constexpr std::uint64_t caption = 3;
inline constexpr std::uint64_t watermark = 4;
inline constexpr std::uint64_t augment = 5;
inline constexpr std::uint64_t shuffle = 6;
inline constexpr std::uint64_t init = 7;
inline constexpr std::uint64_t smoothgrad = 8;
inline constexpr std::uint64_t subset = 9;
}  // namespace stream

}  // namespace sf
