#include "vlm/image.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace vlm {

Image Image::black(std::int64_t width, std::int64_t height) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("Image: bad dimensions");
    Image img;
    img.width = width;
    img.height = height;
    img.pixels.assign(static_cast<std::size_t>(3 * width * height), 0.0);
    return img;
}

namespace {

// Reads one whitespace-delimited PPM header token, skipping '#' comments.
std::string ppm_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
        } else if (!std::isspace(c)) {
            tok.push_back(static_cast<char>(c));
            while ((c = in.get()) != EOF && !std::isspace(c)) tok.push_back(static_cast<char>(c));
            return tok;
        }
    }
    throw std::runtime_error("ppm: truncated header");
}

}  // namespace

Image load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("ppm: cannot open " + path);
    if (ppm_token(in) != "P6") throw std::runtime_error("ppm: not a P6 file: " + path);
    const long width = std::stol(ppm_token(in));
    const long height = std::stol(ppm_token(in));
    const long maxval = std::stol(ppm_token(in));
    if (width <= 0 || height <= 0) throw std::runtime_error("ppm: bad dimensions in " + path);
    if (maxval != 255) throw std::runtime_error("ppm: only maxval 255 supported: " + path);

    std::vector<unsigned char> raw(static_cast<std::size_t>(3 * width * height));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw std::runtime_error("ppm: truncated pixel data in " + path);

    Image img = Image::black(width, height);
    for (std::int64_t y = 0; y < height; ++y) {
        for (std::int64_t x = 0; x < width; ++x) {
            for (std::int64_t c = 0; c < 3; ++c) {
                img.at(c, y, x) =
                    raw[static_cast<std::size_t>((y * width + x) * 3 + c)] / 255.0;
            }
        }
    }
    return img;
}

void save_ppm(const std::string& path, const Image& image) {
    if (image.width <= 0 || image.height <= 0) throw std::invalid_argument("ppm: empty image");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("ppm: cannot open " + path + " for writing");
    out << "P6\n" << image.width << " " << image.height << "\n255\n";
    std::vector<unsigned char> raw(static_cast<std::size_t>(3 * image.width * image.height));
    for (std::int64_t y = 0; y < image.height; ++y) {
        for (std::int64_t x = 0; x < image.width; ++x) {
            for (std::int64_t c = 0; c < 3; ++c) {
                const double v = image.at(c, y, x);
                if (v < 0.0 || v > 1.0 || !std::isfinite(v)) {
                    throw std::runtime_error("ppm: pixel out of [0,1]");
                }
                raw[static_cast<std::size_t>((y * image.width + x) * 3 + c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
        }
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw std::runtime_error("ppm: write failed for " + path);
}

std::uint64_t fnv1a64(const unsigned char* data, std::size_t len) {
    std::uint64_t h = 14695981039346656037ull;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= data[i];
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t image_checksum(const Image& image) {
    std::vector<unsigned char> bytes(image.pixels.size() * 8);
    for (std::size_t i = 0; i < image.pixels.size(); ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &image.pixels[i], 8);
        for (int b = 0; b < 8; ++b) {
            bytes[i * 8 + static_cast<std::size_t>(b)] =
                static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
        }
    }
    return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace vlm
