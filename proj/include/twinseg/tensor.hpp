#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace twinseg {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

/// Dense row-major array of doubles. Value semantics; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(i < 0 ? i + rank() : i); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // Rank-specific accessors, unchecked.
  double& at(int64_t a, int64_t b) { return data_[a * shape_[1] + b]; }
  double at(int64_t a, int64_t b) const { return data_[a * shape_[1] + b]; }
  double& at(int64_t a, int64_t b, int64_t c) {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }
  double at(int64_t a, int64_t b, int64_t c) const {
    return data_[(a * shape_[1] + b) * shape_[2] + c];
  }
  double& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  double at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  /// Same data under a new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  void fill(double v);
  bool all_finite() const;
  double max_value() const;
  double min_value() const;
  double sum() const;

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }
  static Tensor full_like(const Tensor& t, double v) { return Tensor(t.shape(), v); }

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Integer H×W map (labels, masks). Values stored as int32.
struct IntMap {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<int32_t> data;

  IntMap() = default;
  IntMap(int64_t h, int64_t w, int32_t fill = 0)
      : height(h), width(w), data(static_cast<size_t>(h * w), fill) {}

  int32_t& operator()(int64_t i, int64_t j) { return data[i * width + j]; }
  int32_t operator()(int64_t i, int64_t j) const { return data[i * width + j]; }
  int64_t size() const { return height * width; }
  bool operator==(const IntMap&) const = default;
};

}  // namespace twinseg
