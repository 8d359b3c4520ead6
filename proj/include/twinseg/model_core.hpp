#pragma once

#include <array>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "twinseg/autograd.hpp"
#include "twinseg/rng.hpp"

namespace twinseg {

/// Per-channel normalization applied to RGB values in [0, 1].
inline constexpr std::array<double, 3> kPixelMean{0.5, 0.5, 0.5};
inline constexpr std::array<double, 3> kPixelStd{0.25, 0.25, 0.25};

/// Training/inference input. `pixels` is N×3×H×W normalized with
/// kPixelMean/kPixelStd; `labels` is N×K with entries in {0, 1}.
struct ImageBatch {
  Tensor pixels;
  Tensor labels;
  std::vector<std::string> ids;

  int64_t size() const { return pixels.dim(0); }
  int64_t height() const { return pixels.dim(2); }
  int64_t width() const { return pixels.dim(3); }
  /// Undoes the pixel normalization, giving RGB in [0, 1].
  Tensor rgb() const;
};

/// Checks the ImageBatch invariants; throws ContractError.
void validate_batch(const ImageBatch& batch, bool training);

struct MultiLevelFeatures {
  std::array<Var, 4> levels;
  /// N×m×T×T self-attention maps of the last stage, T = h·w.
  Var attention;
};

enum class MapSource { kSegBranch, kClsBranch };

/// (K+1)-channel map, channel 0 is background. N×(K+1)×H×W.
struct SegMap {
  Var probs;
  MapSource source = MapSource::kSegBranch;

  int64_t channels() const { return probs.dim(1); }
};

/// Ordered, named parameter set. Order is insertion order and is what the
/// optimizer and checkpoints iterate.
class ParameterStore {
 public:
  Var add(const std::string& name, Tensor init);
  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Var>>& entries() { return entries_; }
  void zero_grad();
  int64_t total_size() const;

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual MultiLevelFeatures extract(const Var& pixels) const = 0;
  virtual std::array<int, 4> strides() const = 0;
  virtual std::array<int64_t, 4> channels() const = 0;
  virtual int attention_maps() const = 0;
};

struct EncoderConfig {
  std::array<int64_t, 4> widths{16, 32, 48, 64};
  int attention_heads = 4;
};

/// Four strided conv stages (strides 4, 8, 16, 32) with one multi-head
/// self-attention block after the last stage.
class ConvAttentionEncoder : public Encoder {
 public:
  ConvAttentionEncoder(ParameterStore& store, const EncoderConfig& cfg, Rng& rng);
  MultiLevelFeatures extract(const Var& pixels) const override;
  std::array<int, 4> strides() const override { return {4, 8, 16, 32}; }
  std::array<int64_t, 4> channels() const override { return cfg_.widths; }
  int attention_maps() const override { return cfg_.attention_heads; }

 private:
  struct Conv {
    Var weight;
    Var bias;
    int stride;
  };
  Var apply(const Conv& c, const Var& x) const;

  EncoderConfig cfg_;
  std::vector<std::vector<Conv>> stages_;
  Conv query_, key_, value_, proj_;
};

/// 1×1 projection, weight Co×Ci×1×1, optional bias.
struct Head {
  Var weight;
  Var bias;  // undefined when the head has no bias
  Var apply(const Var& x) const;
};

/// Per-level 1×1 projection to a common width, resize to the stride-4 grid,
/// concatenate, fuse with a 1×1 conv + ReLU, then resize to full resolution.
class Decoder {
 public:
  Decoder(ParameterStore& store, const std::array<int64_t, 4>& in_channels, int64_t width,
          Rng& rng);
  /// Returns Z, N×width×out_h×out_w.
  Var decode(const std::array<Var, 4>& levels, int64_t out_h, int64_t out_w) const;
  int64_t width() const { return width_; }

 private:
  int64_t width_;
  std::array<Head, 4> proj_;
  Head fuse_;
};

std::array<int64_t, 2> level_size(int64_t h, int64_t w, int stride);

MultiLevelFeatures extract_features(const ImageBatch& batch, const Encoder& encoder);
/// head(global_max_pool(x4)): N×K logits.
Var classify_image(const Var& x4, const Head& cls_head);
/// Seed: head(x4) applied per position: N×K×h×w.
Var localization_seed(const Var& x4, const Head& cls_head);
/// Object prior: max over classes of the normalized seed: N×1×h×w.
Var object_prior(const Var& normalized_seed);
/// Bilinear upsampling; rejects targets smaller than the source.
Var upsample_bilinear(const Var& map, int64_t out_h, int64_t out_w);
/// Scales every level by the prior resized to that level's grid.
std::array<Var, 4> ofd_scale(const std::array<Var, 4>& levels, const Var& prior);
/// Decoder + segmentation head + softmax over K+1 channels.
SegMap segment(const std::array<Var, 4>& levels, const Decoder& decoder, const Head& seg_head,
               int64_t out_h, int64_t out_w);

/// Output of one forward pass on a single image, used by inference paths.
struct InferenceOutput {
  Tensor seed_raw;   // 1×K×h×w
  Tensor seg_probs;  // 1×(K+1)×H×W
};

class InferenceModel {
 public:
  virtual ~InferenceModel() = default;
  /// `pixels` is 1×3×H×W, normalized.
  virtual InferenceOutput infer(const Tensor& pixels) const = 0;
  virtual int num_classes() const = 0;
};

struct ModelConfig {
  int num_classes = 3;
  EncoderConfig encoder;
  int64_t decoder_width = 32;
  bool cls_head_bias = false;
  bool detach_prior = true;
};

/// Everything the two branches share, plus both heads and the affinity MLP.
class Network : public InferenceModel {
 public:
  Network(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& parameters() { return params_; }
  const ParameterStore& parameters() const { return params_; }
  const Encoder& encoder() const { return *encoder_; }
  const Decoder& decoder() const { return *decoder_; }
  const Head& cls_head() const { return cls_head_; }
  const Head& seg_head() const { return seg_head_; }
  const Var& affinity_weight() const { return aff_weight_; }
  const Var& affinity_bias() const { return aff_bias_; }

  /// Whether inference applies object-aware decoding.
  void set_ofd_enabled(bool on) { ofd_enabled_ = on; }
  bool ofd_enabled() const { return ofd_enabled_; }

  InferenceOutput infer(const Tensor& pixels) const override;
  int num_classes() const override { return cfg_.num_classes; }

 private:
  ModelConfig cfg_;
  ParameterStore params_;
  std::unique_ptr<ConvAttentionEncoder> encoder_;
  std::unique_ptr<Decoder> decoder_;
  Head cls_head_;
  Head seg_head_;
  Var aff_weight_;
  Var aff_bias_;
  bool ofd_enabled_ = true;
};

}  // namespace twinseg
