#include "autovarp/pngio.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "autovarp/errors.hpp"

namespace avp {

namespace {
#include "detail/font8x13.inc"

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
               const std::vector<std::uint8_t>& data) {
    put_u32(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    const auto crc = crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
    put_u32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

Canvas::Canvas(int width, int height, Rgb fill) : width_(width), height_(height) {
    pixels_.resize(static_cast<std::size_t>(width) * height * 3);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) set(x, y, fill);
}

void Canvas::set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
    auto* p = &pixels_[(static_cast<std::size_t>(y) * width_ + x) * 3];
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
}

void Canvas::fill_rect(int x, int y, int w, int h, Rgb c) {
    for (int j = y; j < y + h; ++j)
        for (int i = x; i < x + w; ++i) set(i, j, c);
}

void Canvas::line(int x0, int y0, int x1, int y1, Rgb c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
        set(x0, y0, c);
        if (x0 == x1 && y0 == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

void Canvas::text(int x, int y, const std::string& s, Rgb c) {
    int cx = x;
    for (char ch : s) {
        if (ch == '\n') {
            cx = x;
            y += kFontHeight + 1;
            continue;
        }
        if (ch >= 32 && ch < 127) {
            const unsigned char* glyph = kFont8x13[ch - 32];
            for (int j = 0; j < kFontHeight; ++j)
                for (int i = 0; i < kFontWidth; ++i)
                    if (glyph[j] & (1u << i)) set(cx + i, y + j, c);
        }
        cx += kFontWidth - 1;
    }
}

void Canvas::fill_triangle(double x0, double y0, double x1, double y1, double x2, double y2,
                           Rgb c) {
    const int ymin = std::max(0, static_cast<int>(std::floor(std::min({y0, y1, y2}))));
    const int ymax = std::min(height_ - 1, static_cast<int>(std::ceil(std::max({y0, y1, y2}))));
    const int xmin = std::max(0, static_cast<int>(std::floor(std::min({x0, x1, x2}))));
    const int xmax = std::min(width_ - 1, static_cast<int>(std::ceil(std::max({x0, x1, x2}))));
    const double area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
    if (area == 0) return;
    for (int y = ymin; y <= ymax; ++y) {
        for (int x = xmin; x <= xmax; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            const double w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area;
            const double w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area;
            const double w2 = 1.0 - w0 - w1;
            if (w0 >= -1e-9 && w1 >= -1e-9 && w2 >= -1e-9) set(x, y, c);
        }
    }
}

void write_png(const Canvas& canvas, const std::filesystem::path& path) {
    const int w = canvas.width(), h = canvas.height();

    // raw scanlines, filter byte 0 per row
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(h) * (1 + 3 * w));
    const auto& px = canvas.pixels();
    for (int y = 0; y < h; ++y) {
        raw.push_back(0);
        const auto* row = &px[static_cast<std::size_t>(y) * w * 3];
        raw.insert(raw.end(), row, row + 3 * w);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw IOError("PNG compression failed");
    compressed.resize(bound);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<std::uint8_t> ihdr;
    put_u32(ihdr, static_cast<std::uint32_t>(w));
    put_u32(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // color type: truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", compressed);
    put_chunk(out, "IEND", {});

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IOError("cannot write '" + path.string() + "'");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IOError("write failed for '" + path.string() + "'");
}

Rgb voltage_color(double vm, double lo, double hi) {
    double t = (vm - lo) / (hi - lo);
    t = std::clamp(t, 0.0, 1.0);
    // dark blue -> cyan -> yellow -> red
    const double r = std::clamp(std::min(4 * t - 1.5, -4 * t + 4.5), 0.0, 1.0);
    const double g = std::clamp(std::min(4 * t - 0.5, -4 * t + 3.5), 0.0, 1.0);
    const double b = std::clamp(std::min(4 * t + 0.5, -4 * t + 2.5), 0.0, 1.0);
    return Rgb{static_cast<std::uint8_t>(255 * r), static_cast<std::uint8_t>(255 * g),
               static_cast<std::uint8_t>(255 * b)};
}

}  // namespace avp
