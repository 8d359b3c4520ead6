#pragma once

#include <vector>

#include "twinseg/autograd.hpp"

namespace twinseg {

// Elementwise, same shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& x);
Var sigmoid(const Var& x);
/// Clamps to [lo, hi]; gradient passes where lo <= x <= hi.
Var clamp(const Var& x, double lo, double hi);
Var sum_all(const Var& x);

/// 2-D convolution, NCHW input, weight Co×Ci×k×k, optional bias (Co).
Var conv2d(const Var& x, const Var& weight, const Var* bias, int stride, int padding);

/// Spatial maximum per (n, c): N×C×H×W -> N×C. Ties take the first index.
Var global_max_pool(const Var& x);

/// Bilinear resize with half-pixel centers (align_corners = false).
Var resize_bilinear(const Var& x, int64_t out_h, int64_t out_w);
Tensor resize_bilinear(const Tensor& x, int64_t out_h, int64_t out_w);

Var concat_channels(const std::vector<Var>& xs);
Var slice_channels(const Var& x, int64_t begin, int64_t count);

/// Softmax over dim 1 of an N×C×H×W tensor.
Var softmax_channels(const Var& x);
/// Softmax over the last dimension.
Var softmax_last(const Var& x);

/// Maximum over dim 1: N×C×H×W -> N×1×H×W.
Var channel_max(const Var& x);
/// x (N×C×H×W) times p (N×1×H×W) broadcast over channels.
Var mul_channel_broadcast(const Var& x, const Var& p);

Var reshape(const Var& x, Shape shape);
Var permute(const Var& x, const std::vector<int>& perm);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
/// B×M×K times B×K×N.
Var batched_matmul(const Var& a, const Var& b);

/// Horizontal flip of the last dimension.
Tensor hflip(const Tensor& x);

}  // namespace twinseg
