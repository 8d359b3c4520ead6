#pragma once

#include <utility>
#include <vector>

#include "twinseg/autograd.hpp"
#include "twinseg/model_core.hpp"

namespace twinseg {

/// Local color+position affinity kernel for pixel-adaptive refinement.
struct PropagationKernel {
  /// (dy, dx) offsets; (0, 0) appears exactly once.
  std::vector<std::pair<int, int>> neighborhood;
  double sigma_rgb = 0.3;
  double sigma_pos = 2.0;
  int iterations = 10;

  /// The center plus the 8-neighborhood at each dilation.
  static PropagationKernel dilated(const std::vector<int>& dilations, double sigma_rgb,
                                   double sigma_pos, int iterations);
  static PropagationKernel defaults() { return dilated({1, 2, 4, 8}, 0.3, 2.0, 10); }
  void validate() const;
};

enum class BackgroundOrigin { kFixedThreshold, kSegBranch };

/// N×1×H×W background score in [0, 1]; never carries gradient.
struct BackgroundScore {
  Tensor map;
  BackgroundOrigin origin = BackgroundOrigin::kSegBranch;
};

/// Per-pixel neighbor weights of `kernel` on an N×3×H×W RGB image.
/// Layout: N × |neighborhood| × H × W; weights of out-of-image neighbors are 0.
Tensor propagation_weights(const Tensor& rgb, const PropagationKernel& kernel);

/// Repeats scores_i <- Σ_j w_ij scores_j `iterations` times, channel-shared.
Var par_refine(const Var& scores, const Tensor& rgb, const PropagationKernel& kernel);
Tensor par_refine(const Tensor& scores, const Tensor& rgb, const PropagationKernel& kernel);

/// Takes the segmentation branch's background channel, gradient-stopped.
BackgroundScore background_from_segmap(const SegMap& seg);

/// Stacks [background; seed_up] into N×(K+1)×H×W.
Var bsp_wrap(const Var& seed_up, const BackgroundScore& bg);
/// Stacks a constant background `beta` in front of seed_up.
Var fixed_bg_wrap(const Var& seed_up, double beta);

/// Seed map: clamp(par_refine(s_hat), 0, 1).
SegMap classification_segmap(const Var& s_hat, const Tensor& rgb, const PropagationKernel& kernel);

/// A = sym(sigmoid(Σ_m weight_m · attention_m + bias)); attention is
/// N×m×T×T, weight has m entries, bias one. Returns N×T×T.
Var mlp_affinity(const Var& attention, const Var& weight, const Var& bias);

}  // namespace twinseg
