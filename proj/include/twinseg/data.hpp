#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "twinseg/rng.hpp"
#include "twinseg/tensor.hpp"

namespace twinseg {

/// One image with its image-level labels. `gt_mask` (values 0..K, 0 is
/// background, 255 ignore) is for evaluation only; no training path reads it.
struct SampleRecord {
  Tensor image;             // 3×H×W RGB in [0, 1]
  std::vector<uint8_t> labels;  // K entries in {0, 1}
  std::optional<IntMap> gt_mask;
  std::string id;

  int64_t height() const { return image.dim(1); }
  int64_t width() const { return image.dim(2); }
};

class Dataset {
 public:
  virtual ~Dataset() = default;
  virtual int64_t size() const = 0;
  virtual SampleRecord get(int64_t index) const = 0;
  virtual int num_classes() const = 0;
  virtual std::string id(int64_t index) const { return get(index).id; }
};

class InMemoryDataset : public Dataset {
 public:
  InMemoryDataset(int num_classes, std::vector<SampleRecord> records)
      : num_classes_(num_classes), records_(std::move(records)) {}
  int64_t size() const override { return static_cast<int64_t>(records_.size()); }
  SampleRecord get(int64_t index) const override { return records_.at(static_cast<size_t>(index)); }
  const SampleRecord& at(int64_t index) const { return records_.at(static_cast<size_t>(index)); }
  int num_classes() const override { return num_classes_; }
  std::string id(int64_t index) const override { return at(index).id; }
  std::vector<SampleRecord>& records() { return records_; }
  const std::vector<SampleRecord>& records() const { return records_; }

 private:
  int num_classes_;
  std::vector<SampleRecord> records_;
};

enum class ShapeKind { kDisk, kRectangle, kTriangle, kRing, kCross };

struct SyntheticSpec {
  int num_classes = 3;
  int64_t height = 64;
  int64_t width = 64;
  /// Shape drawn for class k is shapes[k % shapes.size()].
  std::vector<ShapeKind> shapes{ShapeKind::kDisk, ShapeKind::kRectangle, ShapeKind::kTriangle};
  int min_objects = 1;
  int max_objects = 3;
  /// Object half-extent range in pixels.
  double min_size = 9.0;
  double max_size = 16.0;
  /// Amplitude of the low-frequency background and object textures.
  double texture_amplitude = 0.15;
  /// Per-object color jitter around the class color.
  double color_jitter = 0.08;
  uint64_t rng_seed = 0;
  int64_t train_count = 500;
  int64_t val_count = 100;

  void validate() const;
};

struct SyntheticSplits {
  InMemoryDataset train;
  InMemoryDataset val;
};

/// Deterministic given spec.rng_seed; record i of a split only depends on
/// (seed, split, i).
SyntheticSplits generate_synthetic(const SyntheticSpec& spec);
SampleRecord generate_synthetic_sample(const SyntheticSpec& spec, int split, int64_t index);

/// Probability that a class appears in an image under the object sampler,
/// ignoring occlusion.
double synthetic_class_presence_probability(const SyntheticSpec& spec);

/// Stable digest of a dataset's pixels, labels, masks and ids.
uint64_t dataset_checksum(const Dataset& data);

struct AugmentConfig {
  int64_t crop_h = 64;
  int64_t crop_w = 64;
  double scale_min = 0.5;
  double scale_max = 2.0;
  double flip_prob = 0.5;
  /// Fill used when the scaled image is smaller than the crop.
  std::array<double, 3> pad_pixel{0.5, 0.5, 0.5};
};

/// Concrete draw of the random augmentation decisions.
struct AugmentParams {
  double scale = 1.0;
  bool flip = false;
  /// Crop window origin in the scaled image; negative means padding.
  int64_t offset_y = 0;
  int64_t offset_x = 0;
};

AugmentParams draw_augment(Rng& rng, const AugmentConfig& cfg, int64_t height, int64_t width);
SampleRecord apply_augment(const SampleRecord& sample, const AugmentParams& params,
                           const AugmentConfig& cfg);
SampleRecord augment(const SampleRecord& sample, Rng& rng, const AugmentConfig& cfg);

/// Nearest-neighbor label resize (pixel centers).
IntMap resize_nearest(const IntMap& labels, int64_t out_h, int64_t out_w);
IntMap hflip(const IntMap& labels);

using WarningSink = std::function<void(const std::string&)>;

/// Dataset on disk: root/images/<id>.png, root/labels.txt with lines
/// "<id> k1 k2 ..." (0-based object class indices), optional
/// root/masks/<id>.png. Pixels are read on access.
class VocStyleDataset : public Dataset {
 public:
  VocStyleDataset(std::string root, int num_classes, WarningSink warn);
  int64_t size() const override { return static_cast<int64_t>(entries_.size()); }
  SampleRecord get(int64_t index) const override;
  int num_classes() const override { return num_classes_; }
  std::string id(int64_t index) const override { return entries_.at(index).id; }

 private:
  struct Entry {
    std::string id;
    std::vector<uint8_t> labels;
  };
  std::string root_;
  int num_classes_;
  WarningSink warn_;
  std::vector<Entry> entries_;
};

std::unique_ptr<VocStyleDataset> load_voc_style(const std::string& root, int num_classes,
                                                WarningSink warn = {});

/// Writes a dataset in the on-disk layout read by load_voc_style.
void write_voc_style(const Dataset& data, const std::string& root);

}  // namespace twinseg
