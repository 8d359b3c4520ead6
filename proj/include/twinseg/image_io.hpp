#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "twinseg/tensor.hpp"

namespace twinseg {

/// 8-bit PNG helpers. RGB tensors are 3×H×W with values in [0, 1].
Tensor read_png_rgb(const std::string& path);
void write_png_rgb(const std::string& path, const Tensor& rgb);

/// Single-channel 8-bit PNG holding class indices (255 = ignore).
IntMap read_png_labels(const std::string& path);
void write_png_labels(const std::string& path, const IntMap& labels);

/// Raw interleaved 8-bit RGB buffer, for rendered figures.
void write_png_rgb8(const std::string& path, int64_t height, int64_t width,
                    const std::vector<uint8_t>& pixels);

}  // namespace twinseg
