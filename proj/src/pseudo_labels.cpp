#include "twinseg/pseudo_labels.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "twinseg/errors.hpp"
#include "twinseg/ops.hpp"

namespace twinseg {

Tensor seed_normalize(const Tensor& raw) {
  NoGradGuard guard;
  return seed_normalize(Var::constant(raw)).value();
}

Var seed_normalize(const Var& raw) {
  const Tensor& v = raw.value();
  if (v.rank() != 4) throw DimensionError("seed_normalize expects N×K×h×w, got " + shape_str(v.shape()));
  const int64_t planes = v.dim(0) * v.dim(1), hw = v.dim(2) * v.dim(3);
  Tensor out(v.shape());
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(planes));
  auto denom = std::make_shared<std::vector<double>>(static_cast<size_t>(planes));
  for (int64_t p = 0; p < planes; ++p) {
    const double* src = v.data() + p * hw;
    int64_t best = 0;
    double m = std::max(src[0], 0.0);
    for (int64_t i = 1; i < hw; ++i) {
      const double r = std::max(src[i], 0.0);
      if (r > m) {
        m = r;
        best = i;
      }
    }
    (*argmax)[p] = best;
    (*denom)[p] = m + kSeedEpsilon;
    for (int64_t i = 0; i < hw; ++i) out[p * hw + i] = std::max(src[i], 0.0) / (*denom)[p];
  }
  return make_op(std::move(out), {raw}, [argmax, denom, planes, hw](Node& self) {
    const Tensor& in = self.parents[0]->value;
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t p = 0; p < planes; ++p) {
      const double d = (*denom)[p];
      const double* go = self.grad.data() + p * hw;
      const double* y = self.value.data() + p * hw;
      // y_i = r_i / (max r + eps); the max term only depends on r_argmax.
      double dot = 0.0;
      for (int64_t i = 0; i < hw; ++i) {
        if (in[p * hw + i] > 0.0) g[p * hw + i] += go[i] / d;
        dot += go[i] * y[i];
      }
      const int64_t j = (*argmax)[p];
      if (in[p * hw + j] > 0.0) g[p * hw + j] -= dot / d;
    }
  });
}

Tensor filter_absent_classes(const Tensor& scores, const Tensor& labels) {
  if (scores.rank() != 4 || labels.rank() != 2 || labels.dim(0) != scores.dim(0)) {
    throw DimensionError("filter_absent_classes: scores " + shape_str(scores.shape()) +
                         " vs labels " + shape_str(labels.shape()));
  }
  const int64_t n = scores.dim(0), c = scores.dim(1), k = labels.dim(1);
  int64_t offset;
  if (c == k) {
    offset = 0;
  } else if (c == k + 1) {
    offset = 1;
  } else {
    throw DimensionError("filter_absent_classes: " + std::to_string(c) +
                         " channels for " + std::to_string(k) + " classes");
  }
  const int64_t hw = scores.dim(2) * scores.dim(3);
  Tensor out = scores;
  for (int64_t b = 0; b < n; ++b) {
    bool any = false;
    for (int64_t j = 0; j < k; ++j) any = any || labels.at(b, j) != 0.0;
    if (!any) throw ContractError("filter_absent_classes: image has no positive label");
    for (int64_t j = 0; j < k; ++j) {
      if (labels.at(b, j) != 0.0) continue;
      double* plane = out.data() + (b * c + j + offset) * hw;
      std::fill(plane, plane + hw, kExcludedScore);
    }
  }
  return out;
}

std::vector<PseudoLabelMap> argmax_labels(const Tensor& scores) {
  if (scores.rank() != 4) throw DimensionError("argmax_labels expects N×C×H×W");
  const int64_t n = scores.dim(0), c = scores.dim(1), h = scores.dim(2), w = scores.dim(3);
  const int64_t hw = h * w;
  std::vector<PseudoLabelMap> out;
  out.reserve(static_cast<size_t>(n));
  for (int64_t b = 0; b < n; ++b) {
    PseudoLabelMap m(h, w);
    const double* base = scores.data() + b * c * hw;
    for (int64_t i = 0; i < hw; ++i) {
      int32_t best = 0;
      double bv = base[i];
      for (int64_t k = 1; k < c; ++k) {
        if (base[k * hw + i] > bv) {
          bv = base[k * hw + i];
          best = static_cast<int32_t>(k);
        }
      }
      m.data[i] = best;
    }
    out.push_back(std::move(m));
  }
  return out;
}

Tensor fuse_multiscale(const InferenceModel& model, const Tensor& pixels,
                       const FusionOptions& options) {
  if (options.scales.empty()) throw ContractError("fuse_multiscale: no scales given");
  if (pixels.rank() != 4 || pixels.dim(0) != 1) {
    throw DimensionError("fuse_multiscale expects a 1×3×H×W image");
  }
  const int64_t h = pixels.dim(2), w = pixels.dim(3);
  const int64_t mult = std::max<int64_t>(1, options.size_multiple);
  auto scaled_size = [&](int64_t base, double s) {
    int64_t v = static_cast<int64_t>(std::llround(static_cast<double>(base) * s / double(mult))) * mult;
    return std::max(v, mult);
  };

  // Averaging reduces to summing since columns are renormalized below.
  // Maps are accumulated in a fixed order: scales in the order given, then
  // unflipped before flipped.
  Tensor acc;
  for (double s : options.scales) {
    if (!(s > 0.0)) throw ContractError("fuse_multiscale: scales must be positive");
    const Tensor input = resize_bilinear(pixels, scaled_size(h, s), scaled_size(w, s));
    for (int f = 0; f < (options.flip ? 2 : 1); ++f) {
      Tensor probs = model.infer(f ? hflip(input) : input).seg_probs;
      if (f) probs = hflip(probs);
      probs = resize_bilinear(probs, h, w);
      if (acc.empty()) {
        acc = std::move(probs);
      } else {
        for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += probs[i];
      }
    }
  }
  const int64_t c = acc.dim(1), hw = h * w;
  for (int64_t i = 0; i < hw; ++i) {
    double s = 0.0;
    for (int64_t k = 0; k < c; ++k) s += acc[k * hw + i];
    for (int64_t k = 0; k < c; ++k) acc[k * hw + i] = s > 0.0 ? acc[k * hw + i] / s : 1.0 / double(c);
  }
  return acc;
}

}  // namespace twinseg
