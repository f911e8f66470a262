#include "xmgc/image.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>

#include <jpeglib.h>
#include <png.h>

#include "xmgc/error.hpp"

namespace xmgc {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Image read_png_file(const std::string& path, std::FILE* fp) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png reader allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png reader allocation failed");
    }
    std::vector<png_bytep> row_ptrs;
    Image img;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("failed to decode PNG: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    img = make_image(static_cast<int>(w), static_cast<int>(h));
    row_ptrs.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) row_ptrs[y] = img.row(static_cast<int>(y));
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

struct JpegErrorMgr {
    jpeg_error_mgr base;
    std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    std::longjmp(mgr->jump, 1);
}

Image read_jpeg_file(const std::string& path, std::FILE* fp) {
    jpeg_decompress_struct cinfo;
    JpegErrorMgr err;
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw IoError("failed to decode JPEG: " + path);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, fp);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);

    Image img = make_image(static_cast<int>(cinfo.output_width),
                           static_cast<int>(cinfo.output_height));
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = img.row(static_cast<int>(cinfo.output_scanline));
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

// Catmull-Rom kernel (a = -0.5).
double cubic_weight(double t) {
    t = std::abs(t);
    if (t < 1.0) return 1.5 * t * t * t - 2.5 * t * t + 1.0;
    if (t < 2.0) return -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0;
    return 0.0;
}

}  // namespace

Image make_image(int width, int height) {
    if (width <= 0 || height <= 0) {
        throw ValueError("image dimensions must be positive, got " + std::to_string(width) + "x" +
                         std::to_string(height));
    }
    Image img;
    img.width = width;
    img.height = height;
    img.pixels.assign(static_cast<std::size_t>(width) * height * 3, 0);
    return img;
}

Image read_image(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open image file: " + path);
    unsigned char sig[8] = {};
    std::size_t got = std::fread(sig, 1, sizeof(sig), fp.get());
    std::rewind(fp.get());
    if (got >= 8 && png_sig_cmp(sig, 0, 8) == 0) return read_png_file(path, fp.get());
    if (got >= 2 && sig[0] == 0xFF && sig[1] == 0xD8) return read_jpeg_file(path, fp.get());
    throw IoError("unrecognized image format: " + path);
}

void write_png(const std::string& path, const Image& image) {
    if (image.width <= 0 || image.height <= 0 ||
        image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * 3) {
        throw ValueError("malformed image buffer for " + path);
    }
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png writer allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png writer allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed to encode PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
                 static_cast<png_uint_32>(image.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < image.height; ++y) {
        png_write_row(png, const_cast<png_bytep>(image.row(y)));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image resize_bicubic(const Image& source, int width, int height) {
    if (source.width <= 0 || source.height <= 0) throw ValueError("resize of empty image");
    Image out = make_image(width, height);
    if (width == source.width && height == source.height) {
        out.pixels = source.pixels;
        return out;
    }
    const double sx = static_cast<double>(source.width) / width;
    const double sy = static_cast<double>(source.height) / height;
    for (int y = 0; y < height; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = static_cast<int>(std::floor(fy));
        double wy[4];
        for (int i = 0; i < 4; ++i) wy[i] = cubic_weight(fy - (y0 - 1 + i));
        std::uint8_t* orow = out.row(y);
        for (int x = 0; x < width; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = static_cast<int>(std::floor(fx));
            double wx[4];
            for (int i = 0; i < 4; ++i) wx[i] = cubic_weight(fx - (x0 - 1 + i));
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int i = 0; i < 4; ++i) {
                    const int yy = std::clamp(y0 - 1 + i, 0, source.height - 1);
                    const std::uint8_t* srow = source.row(yy);
                    double line = 0.0;
                    for (int j = 0; j < 4; ++j) {
                        const int xx = std::clamp(x0 - 1 + j, 0, source.width - 1);
                        line += wx[j] * srow[xx * 3 + c];
                    }
                    acc += wy[i] * line;
                }
                orow[x * 3 + c] =
                    static_cast<std::uint8_t>(std::clamp(std::lround(acc), 0L, 255L));
            }
        }
    }
    return out;
}

Image crop(const Image& source, int x, int y, int w, int h) {
    if (x < 0 || y < 0 || w <= 0 || h <= 0 || x + w > source.width || y + h > source.height) {
        throw ValueError("crop rect (" + std::to_string(x) + "," + std::to_string(y) + "," +
                         std::to_string(w) + "," + std::to_string(h) + ") exceeds image " +
                         std::to_string(source.width) + "x" + std::to_string(source.height));
    }
    Image out = make_image(w, h);
    for (int row = 0; row < h; ++row) {
        std::memcpy(out.row(row), source.row(y + row) + static_cast<std::size_t>(x) * 3,
                    static_cast<std::size_t>(w) * 3);
    }
    return out;
}

}  // namespace xmgc
