#include "twinseg/model_core.hpp"

#include <cmath>

#include "twinseg/errors.hpp"
#include "twinseg/ops.hpp"
#include "twinseg/pseudo_labels.hpp"

namespace twinseg {
namespace {

Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = stddev * rng.normal();
  return t;
}

Tensor kaiming(int64_t co, int64_t ci, int64_t k, Rng& rng) {
  return normal_init({co, ci, k, k}, std::sqrt(2.0 / static_cast<double>(ci * k * k)), rng);
}

}  // namespace

Tensor ImageBatch::rgb() const {
  Tensor out(pixels.shape());
  const int64_t n = pixels.dim(0), hw = pixels.dim(2) * pixels.dim(3);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t i = 0; i < hw; ++i) {
        const int64_t idx = (b * 3 + c) * hw + i;
        out[idx] = pixels[idx] * kPixelStd[c] + kPixelMean[c];
      }
  return out;
}

void validate_batch(const ImageBatch& batch, bool training) {
  if (batch.pixels.rank() != 4 || batch.pixels.dim(1) != 3) {
    throw DimensionError("image batch must be N×3×H×W, got " + shape_str(batch.pixels.shape()));
  }
  if (batch.labels.rank() != 2 || batch.labels.dim(0) != batch.pixels.dim(0)) {
    throw DimensionError("label matrix " + shape_str(batch.labels.shape()) +
                         " does not match batch " + shape_str(batch.pixels.shape()));
  }
  for (int64_t b = 0; b < batch.labels.dim(0); ++b) {
    double positives = 0;
    for (int64_t k = 0; k < batch.labels.dim(1); ++k) {
      const double v = batch.labels.at(b, k);
      if (v != 0.0 && v != 1.0) throw ContractError("image labels must be exactly 0 or 1");
      positives += v;
    }
    if (training && positives == 0) {
      throw ContractError("training item without any positive image label");
    }
  }
}

Var ParameterStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  entries_.emplace_back(name, Var::parameter(std::move(init)));
  return entries_.back().second;
}

const Var& ParameterStore::get(const std::string& name) const {
  for (const auto& [n, v] : entries_)
    if (n == name) return v;
  throw ContractError("unknown parameter '" + name + "'");
}

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return true;
  return false;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

int64_t ParameterStore::total_size() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.second.value().numel();
  return n;
}

ConvAttentionEncoder::ConvAttentionEncoder(ParameterStore& store, const EncoderConfig& cfg,
                                           Rng& rng)
    : cfg_(cfg) {
  if (cfg.attention_heads < 1 || cfg.widths[3] % cfg.attention_heads != 0) {
    throw ConfigError("attention heads must divide the last stage width");
  }
  auto conv = [&](const std::string& name, int64_t ci, int64_t co, int64_t k, int stride) {
    Conv c;
    c.weight = store.add(name + ".weight", kaiming(co, ci, k, rng));
    c.bias = store.add(name + ".bias", Tensor(Shape{co}, 0.0));
    c.stride = stride;
    return c;
  };
  const auto& w = cfg.widths;
  stages_.push_back({conv("encoder.stage1.conv1", 3, w[0], 3, 2),
                     conv("encoder.stage1.conv2", w[0], w[0], 3, 2)});
  stages_.push_back({conv("encoder.stage2.conv1", w[0], w[1], 3, 2),
                     conv("encoder.stage2.conv2", w[1], w[1], 3, 1)});
  stages_.push_back({conv("encoder.stage3.conv1", w[1], w[2], 3, 2),
                     conv("encoder.stage3.conv2", w[2], w[2], 3, 1)});
  stages_.push_back({conv("encoder.stage4.conv1", w[2], w[3], 3, 2)});
  query_ = conv("encoder.attn.query", w[3], w[3], 1, 1);
  key_ = conv("encoder.attn.key", w[3], w[3], 1, 1);
  value_ = conv("encoder.attn.value", w[3], w[3], 1, 1);
  proj_ = conv("encoder.attn.proj", w[3], w[3], 1, 1);
}

Var ConvAttentionEncoder::apply(const Conv& c, const Var& x) const {
  const int64_t k = c.weight.dim(2);
  return conv2d(x, c.weight, &c.bias, c.stride, static_cast<int>(k / 2));
}

MultiLevelFeatures ConvAttentionEncoder::extract(const Var& pixels) const {
  MultiLevelFeatures out;
  Var x = pixels;
  for (size_t s = 0; s < stages_.size(); ++s) {
    for (const auto& c : stages_[s]) x = relu(apply(c, x));
    out.levels[s] = x;
  }
  // Self-attention over the h·w tokens of the last stage.
  const int64_t n = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t heads = cfg_.attention_heads, d = ch / heads, t = h * w;
  Var q = reshape(apply(query_, x), {n * heads, d, t});
  Var k = reshape(apply(key_, x), {n * heads, d, t});
  Var v = reshape(apply(value_, x), {n * heads, d, t});
  Var scores = scale(batched_matmul(permute(q, {0, 2, 1}), k), 1.0 / std::sqrt(double(d)));
  Var attn = softmax_last(scores);  // (N·m)×T×T, rows index queries
  Var mixed = batched_matmul(v, permute(attn, {0, 2, 1}));
  Var attended = apply(proj_, reshape(mixed, {n, ch, h, w}));
  out.levels[3] = relu(add(x, attended));
  out.attention = reshape(attn, {n, heads, t, t});
  return out;
}

Var Head::apply(const Var& x) const {
  return conv2d(x, weight, bias.defined() ? &bias : nullptr, 1, 0);
}

Decoder::Decoder(ParameterStore& store, const std::array<int64_t, 4>& in_channels, int64_t width,
                 Rng& rng)
    : width_(width) {
  for (int i = 0; i < 4; ++i) {
    const std::string name = "decoder.proj" + std::to_string(i + 1);
    proj_[i].weight = store.add(name + ".weight", kaiming(width, in_channels[i], 1, rng));
    proj_[i].bias = store.add(name + ".bias", Tensor(Shape{width}, 0.0));
  }
  fuse_.weight = store.add("decoder.fuse.weight", kaiming(width, 4 * width, 1, rng));
  fuse_.bias = store.add("decoder.fuse.bias", Tensor(Shape{width}, 0.0));
}

Var Decoder::decode(const std::array<Var, 4>& levels, int64_t out_h, int64_t out_w) const {
  const int64_t gh = levels[0].dim(2), gw = levels[0].dim(3);
  std::vector<Var> parts;
  for (int i = 0; i < 4; ++i) {
    parts.push_back(upsample_bilinear(proj_[i].apply(levels[i]), gh, gw));
  }
  Var fused = relu(fuse_.apply(concat_channels(parts)));
  return upsample_bilinear(fused, out_h, out_w);
}

std::array<int64_t, 2> level_size(int64_t h, int64_t w, int stride) {
  return {h / stride, w / stride};
}

MultiLevelFeatures extract_features(const ImageBatch& batch, const Encoder& encoder) {
  const Tensor& px = batch.pixels;
  if (px.rank() != 4 || px.dim(1) != 3) {
    throw DimensionError("expected N×3×H×W input, got " + shape_str(px.shape()));
  }
  const auto strides = encoder.strides();
  const int largest = strides[3];
  if (px.dim(2) % largest != 0 || px.dim(3) % largest != 0) {
    throw DimensionError("input " + std::to_string(px.dim(2)) + "×" + std::to_string(px.dim(3)) +
                         " is not divisible by encoder stride " + std::to_string(largest));
  }
  MultiLevelFeatures f = encoder.extract(Var::constant(px));
  for (int i = 0; i < 4; ++i) {
    const auto [lh, lw] = level_size(px.dim(2), px.dim(3), strides[i]);
    if (f.levels[i].dim(2) != lh || f.levels[i].dim(3) != lw) {
      throw DimensionError("encoder level " + std::to_string(i + 1) + " has shape " +
                           shape_str(f.levels[i].shape()) + ", expected stride " +
                           std::to_string(strides[i]));
    }
  }
  return f;
}

Var classify_image(const Var& x4, const Head& cls_head) {
  const int64_t n = x4.dim(0), c = x4.dim(1);
  Var pooled = reshape(global_max_pool(x4), {n, c, 1, 1});
  Var logits = cls_head.apply(pooled);
  return reshape(logits, {n, logits.dim(1)});
}

Var localization_seed(const Var& x4, const Head& cls_head) { return cls_head.apply(x4); }

Var object_prior(const Var& normalized_seed) { return channel_max(normalized_seed); }

Var upsample_bilinear(const Var& map, int64_t out_h, int64_t out_w) {
  const int64_t h = map.value().dim(-2), w = map.value().dim(-1);
  if (out_h < h || out_w < w) {
    throw ContractError("upsample_bilinear: target " + std::to_string(out_h) + "×" +
                        std::to_string(out_w) + " is smaller than source " + std::to_string(h) +
                        "×" + std::to_string(w));
  }
  return resize_bilinear(map, out_h, out_w);
}

std::array<Var, 4> ofd_scale(const std::array<Var, 4>& levels, const Var& prior) {
  std::array<Var, 4> out;
  for (int i = 0; i < 4; ++i) {
    Var p = upsample_bilinear(prior, levels[i].dim(2), levels[i].dim(3));
    out[i] = mul_channel_broadcast(levels[i], p);
  }
  return out;
}

SegMap segment(const std::array<Var, 4>& levels, const Decoder& decoder, const Head& seg_head,
               int64_t out_h, int64_t out_w) {
  Var z = decoder.decode(levels, out_h, out_w);
  return SegMap{softmax_channels(seg_head.apply(z)), MapSource::kSegBranch};
}

Network::Network(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  if (cfg.num_classes < 1) throw ConfigError("num_classes must be >= 1");
  Rng rng(derive_seed({seed, 0x6d6f64656cULL}));
  encoder_ = std::make_unique<ConvAttentionEncoder>(params_, cfg.encoder, rng);
  decoder_ = std::make_unique<Decoder>(params_, encoder_->channels(), cfg.decoder_width, rng);
  const int64_t c4 = encoder_->channels()[3];
  cls_head_.weight = params_.add("cls_head.weight",
                                 normal_init({cfg.num_classes, c4, 1, 1}, 0.01, rng));
  if (cfg.cls_head_bias) cls_head_.bias = params_.add("cls_head.bias", Tensor(Shape{cfg.num_classes}));
  seg_head_.weight = params_.add(
      "seg_head.weight",
      normal_init({cfg.num_classes + 1, cfg.decoder_width, 1, 1},
                  std::sqrt(1.0 / static_cast<double>(cfg.decoder_width)), rng));
  seg_head_.bias = params_.add("seg_head.bias", Tensor(Shape{cfg.num_classes + 1}));
  const int m = encoder_->attention_maps();
  aff_weight_ = params_.add("affinity.weight", normal_init({m}, 0.1, rng));
  aff_bias_ = params_.add("affinity.bias", Tensor(Shape{1}));
}

InferenceOutput Network::infer(const Tensor& pixels) const {
  NoGradGuard guard;
  ImageBatch batch{pixels, Tensor(Shape{pixels.dim(0), cfg_.num_classes}, 1.0), {}};
  MultiLevelFeatures f = extract_features(batch, *encoder_);
  Var seed = localization_seed(f.levels[3], cls_head_);
  std::array<Var, 4> levels = f.levels;
  if (ofd_enabled_) levels = ofd_scale(levels, object_prior(seed_normalize(seed)));
  SegMap s = segment(levels, *decoder_, seg_head_, pixels.dim(2), pixels.dim(3));
  return {seed.value(), s.probs.value()};
}

}  // namespace twinseg
