#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace xmgc {

/// 8-bit RGB image, interleaved row-major.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;  // width * height * 3

    std::uint8_t* row(int y) { return pixels.data() + static_cast<std::size_t>(y) * width * 3; }
    const std::uint8_t* row(int y) const {
        return pixels.data() + static_cast<std::size_t>(y) * width * 3;
    }
};

Image make_image(int width, int height);

/// Decodes a PNG or JPEG file (sniffed by signature) to RGB.
Image read_image(const std::string& path);

void write_png(const std::string& path, const Image& image);

/// Catmull-Rom bicubic resampling with edge clamping.
Image resize_bicubic(const Image& source, int width, int height);

/// Bounds-checked sub-image copy.
Image crop(const Image& source, int x, int y, int w, int h);

}  // namespace xmgc
