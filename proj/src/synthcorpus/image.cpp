#include "sf/synthcorpus/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "sf/errors.hpp"

namespace sf::corpus {

namespace {

unsigned char to_byte(float v) {
    const float clamped = std::clamp(v, 0.0f, 1.0f);
    return static_cast<unsigned char>(std::lround(clamped * 255.0f));
}

}  // namespace

void quantize_8bit(Image& image) {
    for (float& p : image.pixels) {
        p = static_cast<float>(to_byte(p)) / 255.0f;
    }
}

void write_pgm_bytes(std::span<const unsigned char> bytes, std::size_t height, std::size_t width,
                     const std::filesystem::path& path) {
    if (bytes.size() != height * width) {
        throw ContractViolation("write_pgm: buffer size does not match dimensions");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open for writing", path);
    }
    out << "P5\n" << width << ' ' << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write failed", path);
    }
}

void write_pgm(const Image& image, const std::filesystem::path& path) {
    std::vector<unsigned char> bytes(image.pixels.size());
    std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(), to_byte);
    write_pgm_bytes(bytes, image.height, image.width, path);
}

Image read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open for reading", path);
    }
    std::string magic;
    std::size_t width = 0, height = 0, maxval = 0;
    in >> magic >> width >> height >> maxval;
    if (magic != "P5" || maxval != 255 || width == 0 || height == 0) {
        throw IoError("not an 8-bit P5 image", path);
    }
    in.get();  // single whitespace after header
    std::vector<unsigned char> bytes(width * height);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
        throw IoError("truncated image data", path);
    }
    Image image(height, width);
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        image.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
    }
    return image;
}

}  // namespace sf::corpus
