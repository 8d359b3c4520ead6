#include "twinseg/supervision.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "twinseg/errors.hpp"
#include "twinseg/ops.hpp"

namespace twinseg {
namespace {

constexpr double kLogFloor = 1e-300;

void check_maps(const Tensor& probs, const std::vector<PseudoLabelMap>& labels,
                const std::vector<ConfidenceMask>* masks, const char* op) {
  if (probs.rank() != 4) throw DimensionError(std::string(op) + ": expected N×C×H×W map");
  const int64_t n = probs.dim(0), c = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
  if (static_cast<int64_t>(labels.size()) != n || (masks && static_cast<int64_t>(masks->size()) != n)) {
    throw DimensionError(std::string(op) + ": batch size mismatch");
  }
  for (int64_t b = 0; b < n; ++b) {
    const auto& y = labels[b];
    if (y.height != h || y.width != w) throw DimensionError(std::string(op) + ": label map shape mismatch");
    if (masks && ((*masks)[b].mask.height != h || (*masks)[b].mask.width != w)) {
      throw DimensionError(std::string(op) + ": mask shape mismatch");
    }
    for (int32_t v : y.data) {
      if (v != kIgnoreLabel && (v < 0 || v >= c)) {
        throw ContractError(std::string(op) + ": label " + std::to_string(v) +
                            " outside {0.." + std::to_string(c - 1) + ", ignore}");
      }
    }
  }
}

ConfidenceMask make_mask(IntMap m) {
  ConfidenceMask out;
  out.count = std::count(m.data.begin(), m.data.end(), 1);
  out.mask = std::move(m);
  return out;
}

// Shared body of the two cross losses. `renormalize` selects the seed-map variant.
Var masked_cross_entropy(const SegMap& map, const std::vector<PseudoLabelMap>& labels,
                         const std::vector<ConfidenceMask>& masks, bool renormalize,
                         const char* op) {
  const Tensor& p = map.probs.value();
  check_maps(p, labels, &masks, op);
  const int64_t n = p.dim(0), c = p.dim(1), hw = p.dim(2) * p.dim(3);

  // Selected (image, pixel, label) triples.
  struct Pick {
    int64_t b, i;
    int32_t y;
  };
  auto picks = std::make_shared<std::vector<Pick>>();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t i = 0; i < hw; ++i) {
      if (masks[b].mask.data[i] == 0) continue;
      const int32_t y = labels[b].data[i];
      if (y == kIgnoreLabel) continue;
      picks->push_back({b, i, y});
    }
  if (picks->empty()) return make_op(Tensor(Shape{1}, 0.0), {map.probs}, [](Node&) {});

  const double inv = 1.0 / static_cast<double>(picks->size());
  double total = 0.0;
  for (const auto& pk : *picks) {
    const double* col = p.data() + pk.b * c * hw + pk.i;
    if (renormalize) {
      double s = 0.0;
      for (int64_t k = 0; k < c; ++k) s += col[k * hw] + kRenormEpsilon;
      total -= std::log(std::max((col[pk.y * hw] + kRenormEpsilon) / s, kLogFloor));
    } else {
      total -= std::log(std::max(col[pk.y * hw], kLogFloor));
    }
  }
  return make_op(Tensor(Shape{1}, total * inv), {map.probs},
                 [picks, inv, c, hw, renormalize](Node& self) {
                   const Tensor& pv = self.parents[0]->value;
                   Tensor& g = self.parents[0]->grad_buffer();
                   const double go = self.grad[0] * inv;
                   for (const auto& pk : *picks) {
                     const int64_t base = pk.b * c * hw + pk.i;
                     if (renormalize) {
                       // -log(a_y) + log(Σ a_k), a_k = p_k + eps.
                       double s = 0.0;
                       for (int64_t k = 0; k < c; ++k) s += pv[base + k * hw] + kRenormEpsilon;
                       for (int64_t k = 0; k < c; ++k) g[base + k * hw] += go / s;
                       g[base + pk.y * hw] -= go / (pv[base + pk.y * hw] + kRenormEpsilon);
                     } else {
                       const double py = pv[base + pk.y * hw];
                       if (py > kLogFloor) g[base + pk.y * hw] -= go / py;
                     }
                   }
                 });
}

}  // namespace

void SupervisionConfig::validate() const {
  if (!(sigma_c > 0.0 && sigma_c < 1.0) || !(sigma_s > 0.0 && sigma_s < 1.0)) {
    throw ConfigError("confidence thresholds must lie in (0, 1)");
  }
  if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) throw ConfigError("loss weights must be >= 0");
  if (warmup_c2s < 0 || warmup_s2c < 0 || bsp_start < 0) throw ConfigError("warmups must be >= 0");
  if (warmup_c2s > warmup_s2c) throw ConfigError("warmup_c2s must not exceed warmup_s2c");
}

std::vector<ConfidenceMask> mask_confident_cls(const SegMap& s_c, double sigma_c) {
  const Tensor& p = s_c.probs.value();
  if (p.rank() != 4) throw DimensionError("mask_confident_cls: expected N×C×H×W map");
  const int64_t n = p.dim(0), c = p.dim(1), h = p.dim(2), w = p.dim(3), hw = h * w;
  std::vector<ConfidenceMask> out;
  for (int64_t b = 0; b < n; ++b) {
    IntMap m(h, w);
    for (int64_t i = 0; i < hw; ++i) {
      double best = p[b * c * hw + i];
      for (int64_t k = 1; k < c; ++k) best = std::max(best, p[(b * c + k) * hw + i]);
      m.data[i] = best > sigma_c ? 1 : 0;
    }
    out.push_back(make_mask(std::move(m)));
  }
  return out;
}

std::vector<ConfidenceMask> mask_confident_seg(const SegMap& s_s,
                                               const std::vector<PseudoLabelMap>& y_s,
                                               double sigma_s) {
  const Tensor& p = s_s.probs.value();
  check_maps(p, y_s, nullptr, "mask_confident_seg");
  const int64_t n = p.dim(0), c = p.dim(1), h = p.dim(2), w = p.dim(3), hw = h * w;
  std::vector<ConfidenceMask> out;
  for (int64_t b = 0; b < n; ++b) {
    IntMap m(h, w);
    for (int64_t i = 0; i < hw; ++i) {
      const int32_t y = y_s[b].data[i];
      if (y == 0 || y == kIgnoreLabel) continue;
      double best = p[b * c * hw + i];
      for (int64_t k = 1; k < c; ++k) best = std::max(best, p[(b * c + k) * hw + i]);
      m.data[i] = best > sigma_s ? 1 : 0;
    }
    out.push_back(make_mask(std::move(m)));
  }
  return out;
}

Var loss_c2s(const SegMap& s_s, const std::vector<PseudoLabelMap>& y_c,
             const std::vector<ConfidenceMask>& m_c) {
  return masked_cross_entropy(s_s, y_c, m_c, false, "loss_c2s");
}

Var loss_s2c(const SegMap& s_c, const std::vector<PseudoLabelMap>& y_s,
             const std::vector<ConfidenceMask>& m_s) {
  return masked_cross_entropy(s_c, y_s, m_s, true, "loss_s2c");
}

Var loss_cls(const Var& logits, const Tensor& labels) {
  const Tensor& c = logits.value();
  if (c.rank() != 2 || c.shape() != labels.shape()) {
    throw DimensionError("loss_cls: logits " + shape_str(c.shape()) + " vs labels " +
                         shape_str(labels.shape()));
  }
  // softplus(-c) for positives, softplus(c) for negatives.
  auto softplus = [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); };
  const double inv = 1.0 / static_cast<double>(c.numel());
  double total = 0.0;
  for (int64_t i = 0; i < c.numel(); ++i) {
    total += labels[i] * softplus(-c[i]) + (1.0 - labels[i]) * softplus(c[i]);
  }
  return make_op(Tensor(Shape{1}, total * inv), {logits}, [labels, inv](Node& self) {
    const Tensor& cv = self.parents[0]->value;
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < cv.numel(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-cv[i]));
      g[i] += self.grad[0] * inv * (s - labels[i]);
    }
  });
}

Var loss_affinity(const Var& affinity, const std::vector<PseudoLabelMap>& labels_low) {
  const Tensor& a = affinity.value();
  if (a.rank() != 3 || a.dim(1) != a.dim(2)) throw DimensionError("loss_affinity: expected N×T×T");
  const int64_t n = a.dim(0), t = a.dim(1);
  if (static_cast<int64_t>(labels_low.size()) != n) throw DimensionError("loss_affinity: batch mismatch");
  for (const auto& y : labels_low) {
    if (y.size() != t) throw DimensionError("loss_affinity: label map has " + std::to_string(y.size()) +
                                            " pixels, affinity has " + std::to_string(t));
  }
  // pair sign: +1 positive, -1 negative, 0 skipped.
  auto sign = std::make_shared<std::vector<int8_t>>(static_cast<size_t>(n * t * t), 0);
  int64_t npos = 0, nneg = 0;
  double lpos = 0.0, lneg = 0.0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t i = 0; i < t; ++i) {
      const int32_t yi = labels_low[b].data[i];
      if (yi == kIgnoreLabel) continue;
      for (int64_t j = 0; j < t; ++j) {
        const int32_t yj = labels_low[b].data[j];
        if (yj == kIgnoreLabel) continue;
        const int64_t idx = (b * t + i) * t + j;
        if (yi == yj) {
          (*sign)[idx] = 1;
          ++npos;
          lpos -= std::log(std::max(a[idx], kLogFloor));
        } else {
          (*sign)[idx] = -1;
          ++nneg;
          lneg -= std::log(std::max(1.0 - a[idx], kLogFloor));
        }
      }
    }
  const double wpos = npos ? 0.5 / static_cast<double>(npos) : 0.0;
  const double wneg = nneg ? 0.5 / static_cast<double>(nneg) : 0.0;
  const double value = wpos * lpos + wneg * lneg;
  return make_op(Tensor(Shape{1}, value), {affinity}, [sign, wpos, wneg](Node& self) {
    const Tensor& av = self.parents[0]->value;
    Tensor& g = self.parents[0]->grad_buffer();
    const double go = self.grad[0];
    for (size_t idx = 0; idx < sign->size(); ++idx) {
      const int8_t s = (*sign)[idx];
      if (s > 0 && av[idx] > kLogFloor) g[idx] -= go * wpos / av[idx];
      if (s < 0 && 1.0 - av[idx] > kLogFloor) g[idx] += go * wneg / (1.0 - av[idx]);
    }
  });
}

PseudoLabelMap reliable_labels_low(const PseudoLabelMap& labels, const ConfidenceMask& mask,
                                   int64_t out_h, int64_t out_w) {
  if (mask.mask.height != labels.height || mask.mask.width != labels.width) {
    throw DimensionError("reliable_labels_low: mask/label shape mismatch");
  }
  PseudoLabelMap out(out_h, out_w);
  for (int64_t y = 0; y < out_h; ++y) {
    const int64_t sy = std::min(labels.height - 1, (2 * y + 1) * labels.height / (2 * out_h));
    for (int64_t x = 0; x < out_w; ++x) {
      const int64_t sx = std::min(labels.width - 1, (2 * x + 1) * labels.width / (2 * out_w));
      out(y, x) = mask.mask(sy, sx) ? labels(sy, sx) : kIgnoreLabel;
    }
  }
  return out;
}

LossReport total_loss(const LossParts& parts, const SupervisionConfig& cfg, int64_t iteration) {
  if (iteration < 0) throw ContractError("total_loss: negative iteration");
  LossReport r;
  std::vector<std::pair<Var, double>> terms;
  if (parts.l_cls.defined()) {
    r.l_cls = parts.l_cls.value()[0];
    r.active.cls = true;
    terms.emplace_back(parts.l_cls, 1.0);
  }
  if (parts.l_c2s.defined()) {
    r.l_c2s = parts.l_c2s.value()[0];
    r.active.c2s = iteration >= cfg.warmup_c2s;
    if (r.active.c2s) terms.emplace_back(parts.l_c2s, cfg.lambda1);
  }
  if (parts.l_s2c.defined()) {
    r.l_s2c = parts.l_s2c.value()[0];
    r.active.s2c = iteration >= cfg.warmup_s2c;
    if (r.active.s2c) terms.emplace_back(parts.l_s2c, cfg.lambda2);
  }
  if (parts.l_aff.defined()) {
    r.l_aff = parts.l_aff.value()[0];
    r.active.aff = true;
    terms.emplace_back(parts.l_aff, cfg.lambda3);
  }
  Var total = Var::constant(Tensor(Shape{1}, 0.0));
  for (const auto& [v, wgt] : terms) total = add(total, wgt == 1.0 ? v : scale(v, wgt));
  r.total_var = total;
  r.total = total.value()[0];
  return r;
}

}  // namespace twinseg
