#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace abdkit::png {

struct Rgba {
    std::uint8_t r = 0, g = 0, b = 0, a = 255;
};

/// 8-bit grayscale PNG.
std::string encode_gray(int rows, int cols, std::span<const std::uint8_t> pixels);
/// 8-bit indexed PNG; pixel values index `palette`, alpha goes into a tRNS chunk.
std::string encode_indexed(int rows, int cols, std::span<const std::uint8_t> pixels, std::span<const Rgba> palette);

struct Image {
    int rows = 0;
    int cols = 0;
    bool indexed = false;
    std::vector<std::uint8_t> pixels;  ///< gray levels or palette indices, one byte per pixel
    std::vector<Rgba> palette;
};

/// Decodes 8-bit gray or indexed PNGs as written above. Throws FormatError otherwise.
Image decode(std::span<const std::uint8_t> bytes);

}  // namespace abdkit::png
