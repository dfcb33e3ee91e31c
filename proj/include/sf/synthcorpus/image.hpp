#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace sf::corpus {

/// Single-channel intensity grid, row-major, values in [0,1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), pixels(h * w, fill) {}

    float& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
    float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
    std::size_t size() const noexcept { return pixels.size(); }

    bool operator==(const Image&) const = default;
};

/// Rounds every pixel to the nearest multiple of 1/255 after clamping to [0,1],
/// so an image survives a PGM round trip unchanged.
void quantize_8bit(Image& image);

/// Binary PGM (P5, maxval 255).
void write_pgm(const Image& image, const std::filesystem::path& path);
Image read_pgm(const std::filesystem::path& path);

/// Writes an arbitrary 8-bit grayscale buffer as P5.
void write_pgm_bytes(std::span<const unsigned char> bytes, std::size_t height, std::size_t width,
                     const std::filesystem::path& path);

}  // namespace sf::corpus
