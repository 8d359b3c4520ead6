#include "twinseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "twinseg/errors.hpp"

namespace twinseg {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
  }
}

template <typename F>
Var unary(const Var& x, F&& f, std::function<void(Node&)> bw) {
  Tensor out(x.shape());
  const double* src = x.value().data();
  double* dst = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) dst[i] = f(src[i]);
  return make_op(std::move(out), {x}, std::move(bw));
}

// Source index pair and fractional weight for one output coordinate.
struct Tap {
  int64_t lo;
  int64_t hi;
  double frac;
};

std::vector<Tap> bilinear_taps(int64_t in, int64_t out) {
  std::vector<Tap> taps(static_cast<size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    if (in == out) {
      taps[o] = {o, o, 0.0};
      continue;
    }
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int64_t lo = static_cast<int64_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    int64_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    self.parents[0]->accumulate(self.grad);
    self.parents[1]->accumulate(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor g = self.grad;
      for (auto& v : g.values()) v = -v;
      self.parents[1]->accumulate(g);
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      Tensor g(self.grad.shape());
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * bv[i];
      self.parents[0]->accumulate(g);
    }
    if (self.parents[1]->requires_grad) {
      Tensor g(self.grad.shape());
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = self.grad[i] * av[i];
      self.parents[1]->accumulate(g);
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double v) { return v * s; }, [s](Node& self) {
    Tensor g = self.grad;
    for (auto& v : g.values()) v *= s;
    self.parents[0]->accumulate(g);
  });
}

Var relu(const Var& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](Node& self) {
    const Tensor& in = self.parents[0]->value;
    Tensor g = self.grad;
    for (int64_t i = 0; i < g.numel(); ++i)
      if (!(in[i] > 0.0)) g[i] = 0.0;
    self.parents[0]->accumulate(g);
  });
}

Var sigmoid(const Var& x) {
  return unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](Node& self) {
    Tensor g = self.grad;
    for (int64_t i = 0; i < g.numel(); ++i) {
      const double s = self.value[i];
      g[i] *= s * (1.0 - s);
    }
    self.parents[0]->accumulate(g);
  });
}

Var clamp(const Var& x, double lo, double hi) {
  return unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); }, [lo, hi](Node& self) {
    const Tensor& in = self.parents[0]->value;
    Tensor g = self.grad;
    for (int64_t i = 0; i < g.numel(); ++i)
      if (in[i] < lo || in[i] > hi) g[i] = 0.0;
    self.parents[0]->accumulate(g);
  });
}

Var sum_all(const Var& x) {
  Tensor out(Shape{1}, x.value().sum());
  return make_op(std::move(out), {x}, [](Node& self) {
    self.parents[0]->accumulate(Tensor::full_like(self.parents[0]->value, self.grad[0]));
  });
}

Var conv2d(const Var& x, const Var& weight, const Var* bias, int stride, int padding) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_rank(xv, 4, "conv2d");
  require_rank(wv, 4, "conv2d weight");
  const int64_t n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const int64_t co = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != ci || wv.dim(3) != k) {
    throw DimensionError("conv2d: weight " + shape_str(wv.shape()) + " incompatible with input " +
                         shape_str(xv.shape()));
  }
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != co)) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias->shape()));
  }
  const int64_t ho = (h + 2 * padding - k) / stride + 1;
  const int64_t wo = (w + 2 * padding - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw DimensionError("conv2d: input too small " + shape_str(xv.shape()));
  const int64_t patch = ci * k * k;
  const int64_t spatial = ho * wo;
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);

  // cols[n] is patch × spatial; for pointwise convs the input itself.
  auto cols = std::make_shared<std::vector<RowMat>>();
  if (!pointwise) {
    cols->resize(static_cast<size_t>(n));
    for (int64_t b = 0; b < n; ++b) {
      RowMat& c = (*cols)[b];
      c.setZero(patch, spatial);
      for (int64_t ch = 0; ch < ci; ++ch) {
        const double* plane = xv.data() + (b * ci + ch) * h * w;
        for (int64_t ky = 0; ky < k; ++ky) {
          for (int64_t kx = 0; kx < k; ++kx) {
            double* row = c.data() + ((ch * k + ky) * k + kx) * spatial;
            for (int64_t oy = 0; oy < ho; ++oy) {
              const int64_t iy = oy * stride - padding + ky;
              if (iy < 0 || iy >= h) continue;
              for (int64_t ox = 0; ox < wo; ++ox) {
                const int64_t ix = ox * stride - padding + kx;
                if (ix < 0 || ix >= w) continue;
                row[oy * wo + ox] = plane[iy * w + ix];
              }
            }
          }
        }
      }
    }
  }

  Tensor out(Shape{n, co, ho, wo});
  ConstMapMat wm(wv.data(), co, patch);
  for (int64_t b = 0; b < n; ++b) {
    MapMat om(out.data() + b * co * spatial, co, spatial);
    if (pointwise) {
      om.noalias() = wm * ConstMapMat(xv.data() + b * ci * spatial, ci, spatial);
    } else {
      om.noalias() = wm * (*cols)[b];
    }
    if (bias) {
      for (int64_t c = 0; c < co; ++c) om.row(c).array() += bias->value()[c];
    }
  }

  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return make_op(std::move(out), parents, [=](Node& self) {
    Node& xn = *self.parents[0];
    Node& wn = *self.parents[1];
    ConstMapMat wmat(wn.value.data(), co, patch);
    const double* gout = self.grad.data();
    if (wn.requires_grad) {
      MapMat gw(wn.grad_buffer().data(), co, patch);
      for (int64_t b = 0; b < n; ++b) {
        ConstMapMat g(gout + b * co * spatial, co, spatial);
        if (pointwise) {
          gw.noalias() += g * ConstMapMat(xn.value.data() + b * ci * spatial, ci, spatial).transpose();
        } else {
          gw.noalias() += g * (*cols)[b].transpose();
        }
      }
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      Tensor& gb = self.parents[2]->grad_buffer();
      for (int64_t b = 0; b < n; ++b)
        for (int64_t c = 0; c < co; ++c) {
          const double* row = gout + (b * co + c) * spatial;
          double s = 0.0;
          for (int64_t i = 0; i < spatial; ++i) s += row[i];
          gb[c] += s;
        }
    }
    if (xn.requires_grad) {
      Tensor& gx = xn.grad_buffer();
      RowMat gcols;
      for (int64_t b = 0; b < n; ++b) {
        ConstMapMat g(gout + b * co * spatial, co, spatial);
        if (pointwise) {
          MapMat(gx.data() + b * ci * spatial, ci, spatial).noalias() += wmat.transpose() * g;
          continue;
        }
        gcols.noalias() = wmat.transpose() * g;
        for (int64_t ch = 0; ch < ci; ++ch) {
          double* plane = gx.data() + (b * ci + ch) * h * w;
          for (int64_t ky = 0; ky < k; ++ky) {
            for (int64_t kx = 0; kx < k; ++kx) {
              const double* row = gcols.data() + ((ch * k + ky) * k + kx) * spatial;
              for (int64_t oy = 0; oy < ho; ++oy) {
                const int64_t iy = oy * stride - padding + ky;
                if (iy < 0 || iy >= h) continue;
                for (int64_t ox = 0; ox < wo; ++ox) {
                  const int64_t ix = ox * stride - padding + kx;
                  if (ix < 0 || ix >= w) continue;
                  plane[iy * w + ix] += row[oy * wo + ox];
                }
              }
            }
          }
        }
      }
    }
  });
}

Var global_max_pool(const Var& x) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "global_max_pool");
  const int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out(Shape{n, c});
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * c));
  for (int64_t i = 0; i < n * c; ++i) {
    const double* p = xv.data() + i * hw;
    int64_t best = 0;
    for (int64_t j = 1; j < hw; ++j)
      if (p[j] > p[best]) best = j;
    (*argmax)[i] = best;
    out[i] = p[best];
  }
  return make_op(std::move(out), {x}, [argmax, hw, n, c](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t i = 0; i < n * c; ++i) g[i * hw + (*argmax)[i]] += self.grad[i];
  });
}

Tensor resize_bilinear(const Tensor& x, int64_t out_h, int64_t out_w) {
  if (x.rank() < 2) throw DimensionError("resize_bilinear: rank < 2");
  const int64_t h = x.dim(-2), w = x.dim(-1);
  const int64_t planes = x.numel() / (h * w);
  Shape shape = x.shape();
  shape[shape.size() - 2] = out_h;
  shape[shape.size() - 1] = out_w;
  Tensor out(shape);
  if (h == out_h && w == out_w) {
    out.storage() = x.storage();
    return out;
  }
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  for (int64_t p = 0; p < planes; ++p) {
    const double* src = x.data() + p * h * w;
    double* dst = out.data() + p * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const Tap& y = ty[oy];
      const double* r0 = src + y.lo * w;
      const double* r1 = src + y.hi * w;
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const Tap& t = tx[ox];
        // Lerp form keeps constant inputs exactly constant.
        const double top = r0[t.lo] + t.frac * (r0[t.hi] - r0[t.lo]);
        const double bot = r1[t.lo] + t.frac * (r1[t.hi] - r1[t.lo]);
        dst[oy * out_w + ox] = top + y.frac * (bot - top);
      }
    }
  }
  return out;
}

Var resize_bilinear(const Var& x, int64_t out_h, int64_t out_w) {
  Tensor out = resize_bilinear(x.value(), out_h, out_w);
  const int64_t h = x.value().dim(-2), w = x.value().dim(-1);
  return make_op(std::move(out), {x}, [h, w, out_h, out_w](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    const int64_t planes = g.numel() / (h * w);
    if (h == out_h && w == out_w) {
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
      return;
    }
    const auto ty = bilinear_taps(h, out_h);
    const auto tx = bilinear_taps(w, out_w);
    for (int64_t p = 0; p < planes; ++p) {
      double* dst = g.data() + p * h * w;
      const double* src = self.grad.data() + p * out_h * out_w;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        const Tap& y = ty[oy];
        for (int64_t ox = 0; ox < out_w; ++ox) {
          const Tap& t = tx[ox];
          const double go = src[oy * out_w + ox];
          const double gy0 = go * (1.0 - y.frac), gy1 = go * y.frac;
          dst[y.lo * w + t.lo] += gy0 * (1.0 - t.frac);
          dst[y.lo * w + t.hi] += gy0 * t.frac;
          dst[y.hi * w + t.lo] += gy1 * (1.0 - t.frac);
          dst[y.hi * w + t.hi] += gy1 * t.frac;
        }
      }
    }
  });
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: no inputs");
  const Tensor& first = xs.front().value();
  require_rank(first, 4, "concat_channels");
  const int64_t n = first.dim(0), h = first.dim(2), w = first.dim(3);
  int64_t total = 0;
  std::vector<int64_t> chans;
  for (const auto& x : xs) {
    const Tensor& v = x.value();
    if (v.rank() != 4 || v.dim(0) != n || v.dim(2) != h || v.dim(3) != w) {
      throw DimensionError("concat_channels: incompatible shapes " + shape_str(first.shape()) +
                           " and " + shape_str(v.shape()));
    }
    chans.push_back(v.dim(1));
    total += v.dim(1);
  }
  const int64_t hw = h * w;
  Tensor out(Shape{n, total, h, w});
  for (int64_t b = 0; b < n; ++b) {
    int64_t offset = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
      const double* src = xs[i].value().data() + b * chans[i] * hw;
      std::copy(src, src + chans[i] * hw, out.data() + (b * total + offset) * hw);
      offset += chans[i];
    }
  }
  return make_op(std::move(out), xs, [chans, n, total, hw](Node& self) {
    int64_t offset = 0;
    for (size_t i = 0; i < chans.size(); ++i) {
      Node& p = *self.parents[i];
      if (p.requires_grad) {
        Tensor& g = p.grad_buffer();
        for (int64_t b = 0; b < n; ++b) {
          const double* src = self.grad.data() + (b * total + offset) * hw;
          double* dst = g.data() + b * chans[i] * hw;
          for (int64_t j = 0; j < chans[i] * hw; ++j) dst[j] += src[j];
        }
      }
      offset += chans[i];
    }
  });
}

Var slice_channels(const Var& x, int64_t begin, int64_t count) {
  const Tensor& v = x.value();
  require_rank(v, 4, "slice_channels");
  const int64_t n = v.dim(0), c = v.dim(1), hw = v.dim(2) * v.dim(3);
  if (begin < 0 || count < 0 || begin + count > c) {
    throw DimensionError("slice_channels: range out of bounds for " + shape_str(v.shape()));
  }
  Tensor out(Shape{n, count, v.dim(2), v.dim(3)});
  for (int64_t b = 0; b < n; ++b) {
    const double* src = v.data() + (b * c + begin) * hw;
    std::copy(src, src + count * hw, out.data() + b * count * hw);
  }
  return make_op(std::move(out), {x}, [n, c, hw, begin, count](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t b = 0; b < n; ++b) {
      const double* src = self.grad.data() + b * count * hw;
      double* dst = g.data() + (b * c + begin) * hw;
      for (int64_t j = 0; j < count * hw; ++j) dst[j] += src[j];
    }
  });
}

Var softmax_channels(const Var& x) {
  const Tensor& v = x.value();
  require_rank(v, 4, "softmax_channels");
  const int64_t n = v.dim(0), c = v.dim(1), hw = v.dim(2) * v.dim(3);
  Tensor out(v.shape());
  for (int64_t b = 0; b < n; ++b) {
    const double* src = v.data() + b * c * hw;
    double* dst = out.data() + b * c * hw;
    for (int64_t i = 0; i < hw; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (int64_t k = 0; k < c; ++k) m = std::max(m, src[k * hw + i]);
      double s = 0.0;
      for (int64_t k = 0; k < c; ++k) {
        const double e = std::exp(src[k * hw + i] - m);
        dst[k * hw + i] = e;
        s += e;
      }
      for (int64_t k = 0; k < c; ++k) dst[k * hw + i] /= s;
    }
  }
  return make_op(std::move(out), {x}, [n, c, hw](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t b = 0; b < n; ++b) {
      const double* p = self.value.data() + b * c * hw;
      const double* go = self.grad.data() + b * c * hw;
      double* gi = g.data() + b * c * hw;
      for (int64_t i = 0; i < hw; ++i) {
        double dot = 0.0;
        for (int64_t k = 0; k < c; ++k) dot += p[k * hw + i] * go[k * hw + i];
        for (int64_t k = 0; k < c; ++k) gi[k * hw + i] += p[k * hw + i] * (go[k * hw + i] - dot);
      }
    }
  });
}

Var softmax_last(const Var& x) {
  const Tensor& v = x.value();
  const int64_t c = v.dim(-1);
  const int64_t rows = v.numel() / c;
  Tensor out(v.shape());
  for (int64_t r = 0; r < rows; ++r) {
    const double* src = v.data() + r * c;
    double* dst = out.data() + r * c;
    const double m = *std::max_element(src, src + c);
    double s = 0.0;
    for (int64_t k = 0; k < c; ++k) s += (dst[k] = std::exp(src[k] - m));
    for (int64_t k = 0; k < c; ++k) dst[k] /= s;
  }
  return make_op(std::move(out), {x}, [rows, c](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t r = 0; r < rows; ++r) {
      const double* p = self.value.data() + r * c;
      const double* go = self.grad.data() + r * c;
      double dot = 0.0;
      for (int64_t k = 0; k < c; ++k) dot += p[k] * go[k];
      for (int64_t k = 0; k < c; ++k) g[r * c + k] += p[k] * (go[k] - dot);
    }
  });
}

Var channel_max(const Var& x) {
  const Tensor& v = x.value();
  require_rank(v, 4, "channel_max");
  const int64_t n = v.dim(0), c = v.dim(1), hw = v.dim(2) * v.dim(3);
  Tensor out(Shape{n, 1, v.dim(2), v.dim(3)});
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n * hw));
  for (int64_t b = 0; b < n; ++b) {
    const double* src = v.data() + b * c * hw;
    for (int64_t i = 0; i < hw; ++i) {
      int64_t best = 0;
      for (int64_t k = 1; k < c; ++k)
        if (src[k * hw + i] > src[best * hw + i]) best = k;
      (*argmax)[b * hw + i] = best;
      out[b * hw + i] = src[best * hw + i];
    }
  }
  return make_op(std::move(out), {x}, [argmax, n, c, hw](Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int64_t b = 0; b < n; ++b)
      for (int64_t i = 0; i < hw; ++i)
        g[(b * c + (*argmax)[b * hw + i]) * hw + i] += self.grad[b * hw + i];
  });
}

Var mul_channel_broadcast(const Var& x, const Var& p) {
  const Tensor& xv = x.value();
  const Tensor& pv = p.value();
  require_rank(xv, 4, "mul_channel_broadcast");
  if (pv.rank() != 4 || pv.dim(0) != xv.dim(0) || pv.dim(1) != 1 || pv.dim(2) != xv.dim(2) ||
      pv.dim(3) != xv.dim(3)) {
    throw DimensionError("mul_channel_broadcast: prior " + shape_str(pv.shape()) +
                         " does not broadcast onto " + shape_str(xv.shape()));
  }
  const int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor out(xv.shape());
  for (int64_t b = 0; b < n; ++b)
    for (int64_t k = 0; k < c; ++k)
      for (int64_t i = 0; i < hw; ++i)
        out[(b * c + k) * hw + i] = xv[(b * c + k) * hw + i] * pv[b * hw + i];
  return make_op(std::move(out), {x, p}, [n, c, hw](Node& self) {
    Node& xn = *self.parents[0];
    Node& pn = *self.parents[1];
    if (xn.requires_grad) {
      Tensor& g = xn.grad_buffer();
      for (int64_t b = 0; b < n; ++b)
        for (int64_t k = 0; k < c; ++k)
          for (int64_t i = 0; i < hw; ++i)
            g[(b * c + k) * hw + i] += self.grad[(b * c + k) * hw + i] * pn.value[b * hw + i];
    }
    if (pn.requires_grad) {
      Tensor& g = pn.grad_buffer();
      for (int64_t b = 0; b < n; ++b)
        for (int64_t k = 0; k < c; ++k)
          for (int64_t i = 0; i < hw; ++i)
            g[b * hw + i] += self.grad[(b * c + k) * hw + i] * xn.value[(b * c + k) * hw + i];
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_op(std::move(out), {x}, [](Node& self) {
    Node& p = *self.parents[0];
    p.accumulate(self.grad.reshaped(p.value.shape()));
  });
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw DimensionError("permute: rank mismatch");
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<int64_t> in_strides(r, 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x.dim(i + 1);
  Tensor out(out_shape);
  std::vector<int64_t> idx(r, 0);
  for (int64_t o = 0; o < out.numel(); ++o) {
    int64_t src = 0;
    for (int i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
    out[o] = x[src];
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

Var permute(const Var& x, const std::vector<int>& perm) {
  Tensor out = permute(x.value(), perm);
  std::vector<int> inverse(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = static_cast<int>(i);
  return make_op(std::move(out), {x}, [inverse](Node& self) {
    self.parents[0]->accumulate(permute(self.grad, inverse));
  });
}

Var batched_matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 3, "batched_matmul");
  require_rank(bv, 3, "batched_matmul");
  const int64_t nb = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
  if (bv.dim(0) != nb || bv.dim(1) != k) {
    throw DimensionError("batched_matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  Tensor out(Shape{nb, m, n});
  for (int64_t i = 0; i < nb; ++i) {
    MapMat(out.data() + i * m * n, m, n).noalias() =
        ConstMapMat(av.data() + i * m * k, m, k) * ConstMapMat(bv.data() + i * k * n, k, n);
  }
  return make_op(std::move(out), {a, b}, [nb, m, k, n](Node& self) {
    Node& an = *self.parents[0];
    Node& bn = *self.parents[1];
    for (int64_t i = 0; i < nb; ++i) {
      ConstMapMat g(self.grad.data() + i * m * n, m, n);
      if (an.requires_grad) {
        MapMat(an.grad_buffer().data() + i * m * k, m, k).noalias() +=
            g * ConstMapMat(bn.value.data() + i * k * n, k, n).transpose();
      }
      if (bn.requires_grad) {
        MapMat(bn.grad_buffer().data() + i * k * n, k, n).noalias() +=
            ConstMapMat(an.value.data() + i * m * k, m, k).transpose() * g;
      }
    }
  });
}

Tensor hflip(const Tensor& x) {
  const int64_t w = x.dim(-1);
  const int64_t rows = x.numel() / w;
  Tensor out(x.shape());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < w; ++j) out[r * w + j] = x[r * w + (w - 1 - j)];
  return out;
}

}  // namespace twinseg
