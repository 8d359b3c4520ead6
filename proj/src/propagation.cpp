#include "twinseg/propagation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <set>

#include "twinseg/errors.hpp"
#include "twinseg/ops.hpp"

namespace twinseg {
namespace {

// One sweep: out_i = Σ_o w[o][i] · in[i + offset_o] for every channel.
void propagate_once(const double* in, double* out, const double* weights,
                    const std::vector<std::pair<int, int>>& offsets, int64_t channels, int64_t h,
                    int64_t w) {
  const int64_t hw = h * w;
  std::fill(out, out + channels * hw, 0.0);
  for (size_t o = 0; o < offsets.size(); ++o) {
    const auto [dy, dx] = offsets[o];
    const double* wo = weights + static_cast<int64_t>(o) * hw;
    const int64_t y0 = std::max<int64_t>(0, -dy), y1 = std::min<int64_t>(h, h - dy);
    const int64_t x0 = std::max<int64_t>(0, -dx), x1 = std::min<int64_t>(w, w - dx);
    for (int64_t c = 0; c < channels; ++c) {
      const double* src = in + c * hw;
      double* dst = out + c * hw;
      for (int64_t y = y0; y < y1; ++y) {
        const double* wr = wo + y * w;
        const double* sr = src + (y + dy) * w + dx;
        double* dr = dst + y * w;
        for (int64_t x = x0; x < x1; ++x) dr[x] += wr[x] * sr[x];
      }
    }
  }
}

// Adjoint of propagate_once.
void propagate_once_transposed(const double* in, double* out, const double* weights,
                               const std::vector<std::pair<int, int>>& offsets, int64_t channels,
                               int64_t h, int64_t w) {
  const int64_t hw = h * w;
  std::fill(out, out + channels * hw, 0.0);
  for (size_t o = 0; o < offsets.size(); ++o) {
    const auto [dy, dx] = offsets[o];
    const double* wo = weights + static_cast<int64_t>(o) * hw;
    const int64_t y0 = std::max<int64_t>(0, -dy), y1 = std::min<int64_t>(h, h - dy);
    const int64_t x0 = std::max<int64_t>(0, -dx), x1 = std::min<int64_t>(w, w - dx);
    for (int64_t c = 0; c < channels; ++c) {
      const double* src = in + c * hw;
      double* dst = out + c * hw;
      for (int64_t y = y0; y < y1; ++y) {
        const double* wr = wo + y * w;
        const double* sr = src + y * w;
        double* dr = dst + (y + dy) * w + dx;
        for (int64_t x = x0; x < x1; ++x) dr[x] += wr[x] * sr[x];
      }
    }
  }
}

void check_same_spatial(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
      a.dim(3) != b.dim(3)) {
    throw DimensionError(std::string(op) + ": spatial shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

}  // namespace

PropagationKernel PropagationKernel::dilated(const std::vector<int>& dilations, double sigma_rgb,
                                             double sigma_pos, int iterations) {
  PropagationKernel k;
  k.sigma_rgb = sigma_rgb;
  k.sigma_pos = sigma_pos;
  k.iterations = iterations;
  k.neighborhood.emplace_back(0, 0);
  std::set<std::pair<int, int>> seen{{0, 0}};
  for (int d : dilations) {
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (dy == 0 && dx == 0) continue;
        std::pair<int, int> o{dy * d, dx * d};
        if (seen.insert(o).second) k.neighborhood.push_back(o);
      }
  }
  return k;
}

void PropagationKernel::validate() const {
  if (iterations < 0) throw ConfigError("propagation iterations must be >= 0");
  if (!(sigma_rgb > 0.0) || !(sigma_pos > 0.0)) {
    throw ConfigError("propagation bandwidths must be positive");
  }
  std::set<std::pair<int, int>> seen;
  for (const auto& o : neighborhood) {
    if (!seen.insert(o).second) throw ConfigError("propagation neighborhood has duplicate offsets");
  }
  if (!seen.count({0, 0})) throw ConfigError("propagation neighborhood must contain (0, 0)");
}

Tensor propagation_weights(const Tensor& rgb, const PropagationKernel& kernel) {
  kernel.validate();
  if (rgb.rank() != 4 || rgb.dim(1) != 3) {
    throw DimensionError("propagation expects an N×3×H×W image, got " + shape_str(rgb.shape()));
  }
  const int64_t n = rgb.dim(0), h = rgb.dim(2), w = rgb.dim(3), hw = h * w;
  const int64_t no = static_cast<int64_t>(kernel.neighborhood.size());
  const double inv_rgb = 1.0 / (2.0 * kernel.sigma_rgb * kernel.sigma_rgb);
  const double inv_pos = 1.0 / (2.0 * kernel.sigma_pos * kernel.sigma_pos);
  Tensor weights(Shape{n, no, h, w});
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (int64_t b = 0; b < n; ++b) {
    const double* img = rgb.data() + b * 3 * hw;
    double* wb = weights.data() + b * no * hw;
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        const int64_t i = y * w + x;
        double m = neg_inf;
        for (int64_t o = 0; o < no; ++o) {
          const auto [dy, dx] = kernel.neighborhood[o];
          const int64_t yy = y + dy, xx = x + dx;
          double logit = neg_inf;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w) {
            const int64_t j = yy * w + xx;
            double d2 = 0.0;
            for (int c = 0; c < 3; ++c) {
              const double diff = img[c * hw + i] - img[c * hw + j];
              d2 += diff * diff;
            }
            logit = -d2 * inv_rgb - static_cast<double>(dy * dy + dx * dx) * inv_pos;
          }
          wb[o * hw + i] = logit;
          m = std::max(m, logit);
        }
        double s = 0.0;
        for (int64_t o = 0; o < no; ++o) {
          double& v = wb[o * hw + i];
          v = std::isinf(v) ? 0.0 : std::exp(v - m);
          s += v;
        }
        for (int64_t o = 0; o < no; ++o) wb[o * hw + i] /= s;
      }
    }
  }
  return weights;
}

Var par_refine(const Var& scores, const Tensor& rgb, const PropagationKernel& kernel) {
  check_same_spatial(scores.value(), rgb, "par_refine");
  kernel.validate();
  if (kernel.iterations == 0) {
    return make_op(scores.value(), {scores}, [](Node& self) { self.parents[0]->accumulate(self.grad); });
  }
  auto weights = std::make_shared<Tensor>(propagation_weights(rgb, kernel));
  const auto& sv = scores.value();
  const int64_t n = sv.dim(0), c = sv.dim(1), h = sv.dim(2), w = sv.dim(3);
  const int64_t hw = h * w, no = weights->dim(1);
  const int iters = kernel.iterations;
  const auto offsets = kernel.neighborhood;

  Tensor out(sv.shape());
  std::vector<double> buf(static_cast<size_t>(c * hw));
  for (int64_t b = 0; b < n; ++b) {
    const double* wb = weights->data() + b * no * hw;
    double* cur = out.data() + b * c * hw;
    std::copy(sv.data() + b * c * hw, sv.data() + (b + 1) * c * hw, cur);
    for (int it = 0; it < iters; ++it) {
      propagate_once(cur, buf.data(), wb, offsets, c, h, w);
      std::copy(buf.begin(), buf.end(), cur);
    }
  }
  return make_op(std::move(out), {scores}, [=](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    std::vector<double> cur(static_cast<size_t>(c * hw)), next(static_cast<size_t>(c * hw));
    for (int64_t b = 0; b < n; ++b) {
      const double* wb = weights->data() + b * no * hw;
      std::copy(self.grad.data() + b * c * hw, self.grad.data() + (b + 1) * c * hw, cur.begin());
      for (int it = 0; it < iters; ++it) {
        propagate_once_transposed(cur.data(), next.data(), wb, offsets, c, h, w);
        std::swap(cur, next);
      }
      double* dst = g.data() + b * c * hw;
      for (int64_t i = 0; i < c * hw; ++i) dst[i] += cur[i];
    }
  });
}

Tensor par_refine(const Tensor& scores, const Tensor& rgb, const PropagationKernel& kernel) {
  NoGradGuard guard;
  return par_refine(Var::constant(scores), rgb, kernel).value();
}

BackgroundScore background_from_segmap(const SegMap& seg) {
  NoGradGuard guard;
  return {slice_channels(seg.probs, 0, 1).value(), BackgroundOrigin::kSegBranch};
}

Var bsp_wrap(const Var& seed_up, const BackgroundScore& bg) {
  if (bg.map.rank() != 4 || bg.map.dim(1) != 1) {
    throw DimensionError("background score must be N×1×H×W, got " + shape_str(bg.map.shape()));
  }
  check_same_spatial(seed_up.value(), bg.map, "bsp_wrap");
  return concat_channels({Var::constant(bg.map), seed_up});
}

Var fixed_bg_wrap(const Var& seed_up, double beta) {
  if (!(beta > 0.0 && beta < 1.0)) {
    throw ConfigError("fixed background score must lie in (0, 1), got " + std::to_string(beta));
  }
  const Tensor& s = seed_up.value();
  if (s.rank() != 4) throw DimensionError("fixed_bg_wrap expects N×K×H×W");
  Tensor bg(Shape{s.dim(0), 1, s.dim(2), s.dim(3)}, beta);
  return concat_channels({Var::constant(std::move(bg)), seed_up});
}

SegMap classification_segmap(const Var& s_hat, const Tensor& rgb, const PropagationKernel& kernel) {
  return SegMap{clamp(par_refine(s_hat, rgb, kernel), 0.0, 1.0), MapSource::kClsBranch};
}

Var mlp_affinity(const Var& attention, const Var& weight, const Var& bias) {
  const Tensor& a = attention.value();
  if (a.rank() != 4 || a.dim(2) != a.dim(3)) {
    throw DimensionError("mlp_affinity expects N×m×T×T attention, got " + shape_str(a.shape()));
  }
  const int64_t n = a.dim(0), m = a.dim(1), t = a.dim(2), tt = t * t;
  if (m < 1 || weight.value().numel() != m || bias.value().numel() != 1) {
    throw DimensionError("mlp_affinity: weight/bias do not match " + std::to_string(m) + " maps");
  }
  // Sigmoid of the per-pair linear mix, kept for the backward pass.
  auto sig = std::make_shared<Tensor>(Shape{n, t, t});
  for (int64_t b = 0; b < n; ++b)
    for (int64_t i = 0; i < tt; ++i) {
      double z = bias.value()[0];
      for (int64_t k = 0; k < m; ++k) z += weight.value()[k] * a[(b * m + k) * tt + i];
      (*sig)[b * tt + i] = 1.0 / (1.0 + std::exp(-z));
    }
  Tensor out(Shape{n, t, t});
  for (int64_t b = 0; b < n; ++b)
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < t; ++j)
        out[b * tt + i * t + j] = 0.5 * ((*sig)[b * tt + i * t + j] + (*sig)[b * tt + j * t + i]);

  return make_op(std::move(out), {attention, weight, bias}, [sig, n, m, t, tt](Node& self) {
    Node& an = *self.parents[0];
    Node& wn = *self.parents[1];
    Node& bn = *self.parents[2];
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < t; ++j) {
          // d out_ij / d sig_ij = d out_ji / d sig_ij = 1/2.
          const double gs = 0.5 * (self.grad[b * tt + i * t + j] + self.grad[b * tt + j * t + i]);
          const double s = (*sig)[b * tt + i * t + j];
          const double gz = gs * s * (1.0 - s);
          if (bn.requires_grad) bn.grad_buffer()[0] += gz;
          for (int64_t k = 0; k < m; ++k) {
            const int64_t idx = (b * m + k) * tt + i * t + j;
            if (wn.requires_grad) wn.grad_buffer()[k] += gz * an.value[idx];
            if (an.requires_grad) an.grad_buffer()[idx] += gz * wn.value[k];
          }
        }
    }
  });
}

}  // namespace twinseg
