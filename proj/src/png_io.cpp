#include "modseg/png_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <memory>
#include <vector>

namespace modseg::png {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept
    {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode)
{
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw IoError("cannot open " + path.string());
    return f;
}

void write_png(const std::filesystem::path& path, int width, int height, int color_type,
               const std::vector<std::uint8_t>& pixels)
{
    auto f = open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing " + path.string());
    }
    png_init_io(png, f.get());
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const int channels = color_type == PNG_COLOR_TYPE_RGB ? 3 : 1;
    const std::size_t stride = static_cast<std::size_t>(width) * static_cast<std::size_t>(channels);
    for (int y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * stride));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fflush(f.get()) != 0) throw IoError("failed flushing " + path.string());
}

std::vector<std::uint8_t> read_png(const std::filesystem::path& path, int want_channels, int& width,
                                   int& height)
{
    auto f = open_file(path, "rb");
    std::uint8_t sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw IoError(path.string() + " is not a PNG file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    std::vector<std::uint8_t> pixels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("corrupt PNG data in " + path.string());
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const png_byte bit_depth = png_get_bit_depth(png, info);
    const png_byte color = png_get_color_type(png, info);
    const int channels = color == PNG_COLOR_TYPE_RGB ? 3 : color == PNG_COLOR_TYPE_GRAY ? 1 : 0;
    if (bit_depth != 8 || channels != want_channels) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError(path.string() + ": unexpected PNG layout (need 8-bit, " +
                      std::to_string(want_channels) + " channel(s))");
    }
    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    const std::size_t stride = static_cast<std::size_t>(width) * static_cast<std::size_t>(channels);
    pixels.resize(stride * static_cast<std::size_t>(height));
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = pixels.data() + static_cast<std::size_t>(y) * stride;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return pixels;
}

}  // namespace

void write_rgb(const std::filesystem::path& path, const RgbImage& img)
{
    const auto h = static_cast<int>(img.rows());
    const auto w = static_cast<int>(img.cols());
    std::vector<std::uint8_t> px(static_cast<std::size_t>(w * h * 3));
    std::size_t p = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            px[p++] = img.r(y, x);
            px[p++] = img.g(y, x);
            px[p++] = img.b(y, x);
        }
    write_png(path, w, h, PNG_COLOR_TYPE_RGB, px);
}

void write_gray(const std::filesystem::path& path, const Plane8& plane)
{
    const auto h = static_cast<int>(plane.rows());
    const auto w = static_cast<int>(plane.cols());
    std::vector<std::uint8_t> px(plane.data(), plane.data() + plane.size());  // row-major already
    write_png(path, w, h, PNG_COLOR_TYPE_GRAY, px);
}

RgbImage read_rgb(const std::filesystem::path& path)
{
    int w = 0, h = 0;
    const auto px = read_png(path, 3, w, h);
    RgbImage img;
    img.r.resize(h, w);
    img.g.resize(h, w);
    img.b.resize(h, w);
    std::size_t p = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            img.r(y, x) = px[p++];
            img.g(y, x) = px[p++];
            img.b(y, x) = px[p++];
        }
    return img;
}

Plane8 read_gray(const std::filesystem::path& path)
{
    int w = 0, h = 0;
    const auto px = read_png(path, 1, w, h);
    Plane8 plane(h, w);
    std::copy(px.begin(), px.end(), plane.data());
    return plane;
}

}  // namespace modseg::png
