#include "mtscene/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>

namespace mtscene {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

FilePtr open_file(const std::string& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw std::runtime_error("png: cannot open '" + path + "'");
    return f;
}

struct WriteCtx {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~WriteCtx() {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    }
};

struct ReadCtx {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~ReadCtx() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    }
};

void write_common(const std::string& path, int64_t h, int64_t w, int color_type, int bit_depth,
                  const std::vector<png_bytep>& rows, const png_color* palette, int palette_size) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("png: non-positive extents");
    FilePtr f = open_file(path, "wb");
    WriteCtx c;
    c.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!c.png) throw std::runtime_error("png: create_write_struct failed");
    c.info = png_create_info_struct(c.png);
    if (!c.info) throw std::runtime_error("png: create_info_struct failed");
    if (setjmp(png_jmpbuf(c.png))) throw std::runtime_error("png: write failed for '" + path + "'");
    png_init_io(c.png, f.get());
    png_set_IHDR(c.png, c.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    if (palette) png_set_PLTE(c.png, c.info, palette, palette_size);
    png_write_info(c.png, c.info);
    if (bit_depth == 16) png_set_swap(c.png);  // buffers are host little-endian
    png_write_image(c.png, const_cast<png_bytepp>(rows.data()));
    png_write_end(c.png, nullptr);
}

void read_header(ReadCtx& c, FILE* f, const std::string& path, int64_t& h, int64_t& w) {
    c.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!c.png) throw std::runtime_error("png: create_read_struct failed");
    c.info = png_create_info_struct(c.png);
    if (!c.info) throw std::runtime_error("png: create_info_struct failed");
    if (setjmp(png_jmpbuf(c.png))) throw std::runtime_error("png: corrupt file '" + path + "'");
    png_init_io(c.png, f);
    png_read_info(c.png, c.info);
    h = png_get_image_height(c.png, c.info);
    w = png_get_image_width(c.png, c.info);
}

}  // namespace

void write_png_rgb8(const std::string& path, const std::vector<uint8_t>& rgb, int64_t h, int64_t w) {
    if (static_cast<int64_t>(rgb.size()) != h * w * 3) throw std::invalid_argument("write_png_rgb8: size mismatch");
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int64_t y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = const_cast<png_bytep>(&rgb[static_cast<size_t>(y * w * 3)]);
    write_common(path, h, w, PNG_COLOR_TYPE_RGB, 8, rows, nullptr, 0);
}

std::vector<uint8_t> read_png_rgb8(const std::string& path, int64_t& h, int64_t& w) {
    FilePtr f = open_file(path, "rb");
    ReadCtx c;
    read_header(c, f.get(), path, h, w);
    if (setjmp(png_jmpbuf(c.png))) throw std::runtime_error("png: corrupt file '" + path + "'");
    int color = png_get_color_type(c.png, c.info);
    int depth = png_get_bit_depth(c.png, c.info);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(c.png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(c.png);
    if (depth == 16) png_set_strip_16(c.png);
    png_set_strip_alpha(c.png);
    png_read_update_info(c.png, c.info);
    if (png_get_rowbytes(c.png, c.info) != static_cast<size_t>(w * 3))
        throw std::runtime_error("png: unexpected row size in '" + path + "'");
    std::vector<uint8_t> out(static_cast<size_t>(h * w * 3));
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int64_t y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = &out[static_cast<size_t>(y * w * 3)];
    png_read_image(c.png, rows.data());
    return out;
}

void write_png_index8(const std::string& path, const std::vector<uint8_t>& idx, int64_t h, int64_t w) {
    if (static_cast<int64_t>(idx.size()) != h * w) throw std::invalid_argument("write_png_index8: size mismatch");
    // fixed palette: index 0 black, then a repeating distinguishable ramp
    png_color palette[256];
    for (int i = 0; i < 256; ++i) {
        palette[i].red = static_cast<png_byte>((i * 67) % 256);
        palette[i].green = static_cast<png_byte>((i * 113) % 256);
        palette[i].blue = static_cast<png_byte>((i * 191) % 256);
    }
    palette[0] = {0, 0, 0};
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int64_t y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = const_cast<png_bytep>(&idx[static_cast<size_t>(y * w)]);
    write_common(path, h, w, PNG_COLOR_TYPE_PALETTE, 8, rows, palette, 256);
}

std::vector<uint8_t> read_png_index8(const std::string& path, int64_t& h, int64_t& w) {
    FilePtr f = open_file(path, "rb");
    ReadCtx c;
    read_header(c, f.get(), path, h, w);
    if (setjmp(png_jmpbuf(c.png))) throw std::runtime_error("png: corrupt file '" + path + "'");
    int color = png_get_color_type(c.png, c.info);
    int depth = png_get_bit_depth(c.png, c.info);
    if (color != PNG_COLOR_TYPE_PALETTE && color != PNG_COLOR_TYPE_GRAY)
        throw std::runtime_error("png: '" + path + "' is not an indexed or gray mask");
    if (depth < 8) png_set_packing(c.png);
    if (depth == 16) throw std::runtime_error("png: 16-bit mask not supported in '" + path + "'");
    png_read_update_info(c.png, c.info);
    if (png_get_rowbytes(c.png, c.info) != static_cast<size_t>(w))
        throw std::runtime_error("png: unexpected row size in '" + path + "'");
    std::vector<uint8_t> out(static_cast<size_t>(h * w));
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int64_t y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = &out[static_cast<size_t>(y * w)];
    png_read_image(c.png, rows.data());
    return out;
}

void write_png_gray16(const std::string& path, const std::vector<uint16_t>& gray, int64_t h, int64_t w) {
    if (static_cast<int64_t>(gray.size()) != h * w) throw std::invalid_argument("write_png_gray16: size mismatch");
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int64_t y = 0; y < h; ++y)
        rows[static_cast<size_t>(y)] =
            const_cast<png_bytep>(reinterpret_cast<const png_byte*>(&gray[static_cast<size_t>(y * w)]));
    write_common(path, h, w, PNG_COLOR_TYPE_GRAY, 16, rows, nullptr, 0);
}

std::vector<uint16_t> read_png_gray16(const std::string& path, int64_t& h, int64_t& w) {
    FilePtr f = open_file(path, "rb");
    ReadCtx c;
    read_header(c, f.get(), path, h, w);
    if (setjmp(png_jmpbuf(c.png))) throw std::runtime_error("png: corrupt file '" + path + "'");
    int color = png_get_color_type(c.png, c.info);
    int depth = png_get_bit_depth(c.png, c.info);
    if (color != PNG_COLOR_TYPE_GRAY || depth != 16)
        throw std::runtime_error("png: '" + path + "' is not 16-bit grayscale");
    png_set_swap(c.png);
    png_read_update_info(c.png, c.info);
    if (png_get_rowbytes(c.png, c.info) != static_cast<size_t>(w * 2))
        throw std::runtime_error("png: unexpected row size in '" + path + "'");
    std::vector<uint16_t> out(static_cast<size_t>(h * w));
    std::vector<png_bytep> rows(static_cast<size_t>(h));
    for (int64_t y = 0; y < h; ++y)
        rows[static_cast<size_t>(y)] = reinterpret_cast<png_byte*>(&out[static_cast<size_t>(y * w)]);
    png_read_image(c.png, rows.data());
    return out;
}

}  // namespace mtscene
