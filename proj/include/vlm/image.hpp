#pragma once

// Planar RGB image with values in [0,1], channel plane major ([3,H,W]).

#include <cstdint>
#include <string>
#include <vector>

namespace vlm {

struct Image {
    std::int64_t width = 0;
    std::int64_t height = 0;
    std::vector<double> pixels;  // 3 * height * width

    static Image black(std::int64_t width, std::int64_t height);

    double at(std::int64_t c, std::int64_t y, std::int64_t x) const {
        return pixels[static_cast<std::size_t>((c * height + y) * width + x)];
    }
    double& at(std::int64_t c, std::int64_t y, std::int64_t x) {
        return pixels[static_cast<std::size_t>((c * height + y) * width + x)];
    }
};

// Binary PPM (P6), 8 bits per channel; pixel byte b maps to b/255.0.
Image load_ppm(const std::string& path);
void save_ppm(const std::string& path, const Image& image);

// FNV-1a over the little-endian bit patterns of the pixel doubles.
std::uint64_t image_checksum(const Image& image);
std::uint64_t fnv1a64(const unsigned char* data, std::size_t len);

}  // namespace vlm
