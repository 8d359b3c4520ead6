#pragma once

#include <cstdint>
#include <vector>

#include "twinseg/autograd.hpp"
#include "twinseg/model_core.hpp"

namespace twinseg {

inline constexpr int32_t kIgnoreLabel = 255;
/// Score given to classes excluded by image-level labels.
inline constexpr double kExcludedScore = -1e30;
inline constexpr double kSeedEpsilon = 1e-5;

/// H×W labels in {0..K} ∪ {kIgnoreLabel}; 0 is background.
using PseudoLabelMap = IntMap;

/// ReLU, then per (image, class) division by (spatial max + 1e-5).
Var seed_normalize(const Var& raw);
Tensor seed_normalize(const Tensor& raw);

/// Pushes object channels of classes absent from `labels` (N×K) to
/// kExcludedScore. `scores` is N×K×H×W or N×(K+1)×H×W; in the latter case
/// channel 0 is background and left untouched.
Tensor filter_absent_classes(const Tensor& scores, const Tensor& labels);

/// Per-pixel channel argmax, ties to the lowest index. One map per image.
std::vector<PseudoLabelMap> argmax_labels(const Tensor& scores);

struct FusionOptions {
  std::vector<double> scales{1.0};
  bool flip = false;
  /// Scaled sizes are rounded to a multiple of this (the encoder stride).
  int64_t size_multiple = 1;
};

/// Averages the model's segmentation probabilities over scales and optional
/// horizontal flips at the input resolution, then renormalizes each column.
/// `pixels` is 1×3×H×W; returns 1×(K+1)×H×W.
Tensor fuse_multiscale(const InferenceModel& model, const Tensor& pixels,
                       const FusionOptions& options);

}  // namespace twinseg
