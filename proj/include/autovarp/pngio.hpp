#pragma once

// Minimal RGB canvas with PNG output (zlib-deflated, filter 0). Enough for
// restitution charts and voltage frame export; no external image library.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace avp {

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
};

class Canvas {
  public:
    Canvas(int width, int height, Rgb fill = {0, 0, 0});

    int width() const { return width_; }
    int height() const { return height_; }

    void set(int x, int y, Rgb c);
    void fill_rect(int x, int y, int w, int h, Rgb c);
    void line(int x0, int y0, int x1, int y1, Rgb c);
    void text(int x, int y, const std::string& s, Rgb c);
    void fill_triangle(double x0, double y0, double x1, double y1, double x2, double y2, Rgb c);

    const std::vector<std::uint8_t>& pixels() const { return pixels_; }  // RGB, row-major

  private:
    int width_, height_;
    std::vector<std::uint8_t> pixels_;
};

void write_png(const Canvas& canvas, const std::filesystem::path& path);

// Diverging-free voltage colormap over [lo, hi], clamped.
Rgb voltage_color(double vm, double lo = -85.0, double hi = 30.0);

}  // namespace avp
