#pragma once

// Minimal lossless 8-bit RGB raster io used by the corpus layer.

#include <cstdint>
#include <string>
#include <vector>

namespace foba {

struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> pixels;  // height * width * 3, row-major, RGB

    RgbImage() = default;
    RgbImage(int h, int w) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, 0) {}

    uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + static_cast<size_t>(c)];
    }
    uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + static_cast<size_t>(c)];
    }
};

// Throws MissingFile when the path does not exist, IoError on malformed or
// unwritable data. Gray, paletted and alpha inputs are expanded to RGB.
RgbImage read_png(const std::string& path);
void write_png(const std::string& path, const RgbImage& img);

}  // namespace foba
