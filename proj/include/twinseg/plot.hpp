#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace twinseg {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;  // (x, y)
};

/// Renders the series as colored polylines on a shared, auto-scaled grid and
/// writes an RGB PNG. The plot has no text; series colors follow the order
/// of `series` (see plot_color).
void write_line_plot(const std::string& path, const std::vector<Series>& series, int width = 640,
                     int height = 400);

/// RGB color of the i-th series.
std::array<uint8_t, 3> plot_color(size_t i);

}  // namespace twinseg
