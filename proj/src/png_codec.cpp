#include "abdkit/png.hpp"

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <cstring>

#include "abdkit/error.hpp"

namespace abdkit::png {

namespace {

// libpng is C: errors leave through longjmp and are rethrown once back in C++ frames.
struct ErrorSlot {
    char message[256] = {};
};

void on_error(png_structp p, png_const_charp msg) {
    auto* slot = static_cast<ErrorSlot*>(png_get_error_ptr(p));
    std::snprintf(slot->message, sizeof slot->message, "%s", msg);
    png_longjmp(p, 1);
}

void on_warning(png_structp, png_const_charp) {}

void append(png_structp p, png_bytep data, png_size_t n) {
    auto* out = static_cast<std::string*>(png_get_io_ptr(p));
    out->append(reinterpret_cast<const char*>(data), n);
}

void no_flush(png_structp) {}

struct Reader {
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;
};

void consume(png_structp p, png_bytep data, png_size_t n) {
    auto* r = static_cast<Reader*>(png_get_io_ptr(p));
    if (r->pos + n > r->bytes.size()) png_error(p, "truncated stream");
    std::memcpy(data, r->bytes.data() + r->pos, n);
    r->pos += n;
}

std::string encode(int rows, int cols, std::span<const std::uint8_t> pixels, int color_type,
                   std::span<const Rgba> palette) {
    if (rows < 1 || cols < 1 || pixels.size() != static_cast<std::size_t>(rows) * cols) {
        throw ShapeError("png: pixel count does not match rows x cols");
    }
    ErrorSlot slot;
    std::string out;
    std::vector<png_color> colors;
    std::vector<png_byte> alpha;
    for (const Rgba& c : palette) {
        colors.push_back({c.r, c.g, c.b});
        alpha.push_back(c.a);
    }
    png_structp p = png_create_write_struct(PNG_LIBPNG_VER_STRING, &slot, on_error, on_warning);
    if (!p) throw Error("png: cannot allocate writer");
    png_infop info = png_create_info_struct(p);
    if (setjmp(png_jmpbuf(p))) {
        png_destroy_write_struct(&p, &info);
        throw FormatError(std::string("png: ") + slot.message);
    }
    png_set_write_fn(p, &out, append, no_flush);
    png_set_IHDR(p, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    if (color_type == PNG_COLOR_TYPE_PALETTE) {
        png_set_PLTE(p, info, colors.data(), static_cast<int>(colors.size()));
        png_set_tRNS(p, info, alpha.data(), static_cast<int>(alpha.size()), nullptr);
    }
    png_write_info(p, info);
    for (int r = 0; r < rows; ++r) {
        png_write_row(p, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(r) * cols));
    }
    png_write_end(p, nullptr);
    png_destroy_write_struct(&p, &info);
    return out;
}

}  // namespace

std::string encode_gray(int rows, int cols, std::span<const std::uint8_t> pixels) {
    return encode(rows, cols, pixels, PNG_COLOR_TYPE_GRAY, {});
}

std::string encode_indexed(int rows, int cols, std::span<const std::uint8_t> pixels, std::span<const Rgba> palette) {
    if (palette.empty() || palette.size() > 256) throw ShapeError("png: palette needs 1..256 entries");
    for (std::uint8_t v : pixels) {
        if (v >= palette.size()) throw RangeError("png: pixel value " + std::to_string(v) + " has no palette entry");
    }
    return encode(rows, cols, pixels, PNG_COLOR_TYPE_PALETTE, palette);
}

Image decode(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw FormatError("png: bad signature");
    ErrorSlot slot;
    Reader src{bytes, 0};
    Image img;
    bool supported = true;
    png_structp p = png_create_read_struct(PNG_LIBPNG_VER_STRING, &slot, on_error, on_warning);
    if (!p) throw Error("png: cannot allocate reader");
    png_infop info = png_create_info_struct(p);
    if (setjmp(png_jmpbuf(p))) {
        png_destroy_read_struct(&p, &info, nullptr);
        throw FormatError(std::string("png: ") + slot.message);
    }
    png_set_read_fn(p, &src, consume);
    png_read_info(p, info);
    const int depth = png_get_bit_depth(p, info);
    const int type = png_get_color_type(p, info);
    if (depth != 8 || (type != PNG_COLOR_TYPE_GRAY && type != PNG_COLOR_TYPE_PALETTE) ||
        png_get_interlace_type(p, info) != PNG_INTERLACE_NONE) {
        supported = false;
    } else {
        img.rows = static_cast<int>(png_get_image_height(p, info));
        img.cols = static_cast<int>(png_get_image_width(p, info));
        img.indexed = type == PNG_COLOR_TYPE_PALETTE;
        if (img.indexed) {
            png_colorp colors = nullptr;
            int n = 0;
            png_get_PLTE(p, info, &colors, &n);
            png_bytep alpha = nullptr;
            int n_alpha = 0;
            png_color_16p unused = nullptr;
            if (png_get_valid(p, info, PNG_INFO_tRNS)) png_get_tRNS(p, info, &alpha, &n_alpha, &unused);
            for (int i = 0; i < n; ++i) {
                img.palette.push_back({colors[i].red, colors[i].green, colors[i].blue,
                                       static_cast<std::uint8_t>(i < n_alpha ? alpha[i] : 255)});
            }
        }
        img.pixels.resize(static_cast<std::size_t>(img.rows) * img.cols);
        for (int r = 0; r < img.rows; ++r) png_read_row(p, img.pixels.data() + static_cast<std::size_t>(r) * img.cols, nullptr);
        png_read_end(p, nullptr);
    }
    png_destroy_read_struct(&p, &info, nullptr);
    if (!supported) throw FormatError("png: only non-interlaced 8-bit gray or indexed images are supported");
    return img;
}

}  // namespace abdkit::png
