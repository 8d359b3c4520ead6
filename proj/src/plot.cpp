#include "twinseg/plot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "twinseg/errors.hpp"
#include "twinseg/image_io.hpp"

namespace twinseg {

namespace {

class Canvas {
 public:
  Canvas(int w, int h) : w_(w), h_(h), px_(static_cast<size_t>(w * h * 3), 255) {}

  void set(int x, int y, const std::array<uint8_t, 3>& c) {
    if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
    std::copy(c.begin(), c.end(), px_.begin() + (y * w_ + x) * 3);
  }

  void line(int x0, int y0, int x1, int y1, const std::array<uint8_t, 3>& c, int thick = 1) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      for (int oy = 0; oy < thick; ++oy)
        for (int ox = 0; ox < thick; ++ox) set(x0 + ox - thick / 2, y0 + oy - thick / 2, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) { err += dy; x0 += sx; }
      if (e2 <= dx) { err += dx; y0 += sy; }
    }
  }

  void rect(int x0, int y0, int x1, int y1, const std::array<uint8_t, 3>& c) {
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) set(x, y, c);
  }

  const std::vector<uint8_t>& pixels() const { return px_; }

 private:
  int w_, h_;
  std::vector<uint8_t> px_;
};

}  // namespace

std::array<uint8_t, 3> plot_color(size_t i) {
  static const std::array<std::array<uint8_t, 3>, 6> palette{{
      {31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {255, 127, 14}, {148, 103, 189}, {23, 190, 207},
  }};
  return palette[i % palette.size()];
}

void write_line_plot(const std::string& path, const std::vector<Series>& series, int width,
                     int height) {
  if (width < 64 || height < 64) throw ContractError("plot must be at least 64×64");
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const Series& s : series)
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      xmin = std::min(xmin, x), xmax = std::max(xmax, x);
      ymin = std::min(ymin, y), ymax = std::max(ymax, y);
    }
  if (!(xmin <= xmax)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;

  Canvas cv(width, height);
  const int left = 40, right = width - 16, top = 16, bottom = height - 32;
  const std::array<uint8_t, 3> grid{225, 225, 225}, axis{0, 0, 0};
  for (int i = 0; i <= 4; ++i) {
    const int y = top + (bottom - top) * i / 4;
    const int x = left + (right - left) * i / 4;
    cv.line(left, y, right, y, grid);
    cv.line(x, top, x, bottom, grid);
  }
  cv.line(left, bottom, right, bottom, axis);
  cv.line(left, top, left, bottom, axis);

  auto to_px = [&](double x, double y) {
    const int px = left + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (right - left)));
    const int py = bottom - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (bottom - top)));
    return std::pair<int, int>{px, py};
  };
  for (size_t i = 0; i < series.size(); ++i) {
    const auto color = plot_color(i);
    bool have = false;
    std::pair<int, int> prev{};
    for (const auto& [x, y] : series[i].points) {
      if (!std::isfinite(x) || !std::isfinite(y)) {
        have = false;
        continue;
      }
      const auto cur = to_px(x, y);
      if (have) cv.line(prev.first, prev.second, cur.first, cur.second, color, 2);
      prev = cur;
      have = true;
    }
    // Legend swatch, top right.
    const int sy = top + 4 + static_cast<int>(i) * 10;
    cv.rect(right - 20, sy, right - 6, sy + 6, color);
  }
  write_png_rgb8(path, height, width, cv.pixels());
}

}  // namespace twinseg
