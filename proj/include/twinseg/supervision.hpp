#pragma once

#include <cstdint>
#include <vector>

#include "twinseg/autograd.hpp"
#include "twinseg/model_core.hpp"
#include "twinseg/pseudo_labels.hpp"

namespace twinseg {

/// Binary H×W mask with its population count.
struct ConfidenceMask {
  IntMap mask;
  int64_t count = 0;
};

struct SupervisionConfig {
  double sigma_c = 0.75;
  double sigma_s = 0.5;
  double lambda1 = 0.7;
  double lambda2 = 0.1;
  double lambda3 = 0.1;
  int64_t warmup_c2s = 2000;
  int64_t warmup_s2c = 4000;
  int64_t bsp_start = 4000;

  void validate() const;
};

/// Offset added to every channel before renormalizing seed-map columns.
inline constexpr double kRenormEpsilon = 1e-6;

/// 1 where the column maximum of the seed map is strictly above sigma_c.
std::vector<ConfidenceMask> mask_confident_cls(const SegMap& s_c, double sigma_c);

/// 1 where the segmentation label is not background and the column maximum
/// of the segmentation softmax is strictly above sigma_s.
std::vector<ConfidenceMask> mask_confident_seg(const SegMap& s_s,
                                               const std::vector<PseudoLabelMap>& y_s,
                                               double sigma_s);

/// Masked mean of -log softmax[y] over the batch. Zero for an empty mask.
Var loss_c2s(const SegMap& s_s, const std::vector<PseudoLabelMap>& y_c,
             const std::vector<ConfidenceMask>& m_c);

/// Masked mean cross-entropy of the renormalized seed-map columns against the
/// segmentation labels.
Var loss_s2c(const SegMap& s_c, const std::vector<PseudoLabelMap>& y_s,
             const std::vector<ConfidenceMask>& m_s);

/// Multi-label soft margin loss, averaged over classes and the batch.
Var loss_cls(const Var& logits, const Tensor& labels);

/// Balanced BCE between affinity (N×T×T) and pairs of low-resolution labels.
/// Pairs touching kIgnoreLabel are skipped.
Var loss_affinity(const Var& affinity, const std::vector<PseudoLabelMap>& labels_low);

/// Nearest-neighbor (pixel-center) downsampling of a label map; pixels whose
/// mask entry is 0 become kIgnoreLabel first.
PseudoLabelMap reliable_labels_low(const PseudoLabelMap& labels, const ConfidenceMask& mask,
                                   int64_t out_h, int64_t out_w);

/// Individual loss terms; undefined entries count as inactive.
struct LossParts {
  Var l_cls;
  Var l_c2s;
  Var l_s2c;
  Var l_aff;
};

struct LossReport {
  double l_cls = 0.0;
  double l_c2s = 0.0;
  double l_s2c = 0.0;
  double l_aff = 0.0;
  double total = 0.0;
  struct {
    bool cls = false;
    bool c2s = false;
    bool s2c = false;
    bool aff = false;
  } active;
  Var total_var;
};

/// cls + lambda1 * c2s (from warmup_c2s) + lambda2 * s2c (from warmup_s2c) + lambda3 * aff.
LossReport total_loss(const LossParts& parts, const SupervisionConfig& cfg, int64_t iteration);

}  // namespace twinseg
