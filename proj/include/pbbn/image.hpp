#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace pbbn {

/// 8-bit image, row-major, channel-interleaved. channels is 1 (grey) or 3.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int h, int w, int c, std::uint8_t fill = 0);

    std::uint8_t& at(int y, int x, int c) { return pixels[static_cast<std::size_t>((y * width + x) * channels + c)]; }
    std::uint8_t at(int y, int x, int c) const {
        return pixels[static_cast<std::size_t>((y * width + x) * channels + c)];
    }

    bool operator==(const Image&) const = default;
};

/// Reads binary PGM (P5) or PPM (P6), maxval 255. Comments allowed in the header.
Image read_pnm(const std::filesystem::path& path);

/// Writes P5 for 1-channel images, P6 for 3-channel. No comments emitted.
void write_pnm(const Image& img, const std::filesystem::path& path);

}  // namespace pbbn
