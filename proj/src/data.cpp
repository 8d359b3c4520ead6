#include "twinseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "twinseg/errors.hpp"
#include "twinseg/image_io.hpp"
#include "twinseg/ops.hpp"
#include "twinseg/pseudo_labels.hpp"

namespace fs = std::filesystem;

namespace twinseg {
namespace {

constexpr int kMaxPlacementTries = 30;

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(std::floor(h));
  const double f = h - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

std::array<double, 3> class_color(int k, int num_classes) {
  return hsv_to_rgb(static_cast<double>(k) / num_classes, 0.75, 0.85);
}

// Smooth noise: a coarse grid of normals, bilinearly resized.
Tensor low_frequency_noise(Rng& rng, int channels, int64_t h, int64_t w, int64_t grid) {
  Tensor coarse(Shape{channels, grid, grid});
  for (auto& v : coarse.values()) v = rng.normal();
  return resize_bilinear(coarse, h, w);
}

struct ShapeInstance {
  ShapeKind kind;
  double cx, cy, size, aspect, angle;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    switch (kind) {
      case ShapeKind::kDisk:
        return dx * dx + dy * dy <= size * size;
      case ShapeKind::kRectangle:
        return std::abs(dx) <= size * aspect && std::abs(dy) <= size / aspect;
      case ShapeKind::kRing: {
        const double d2 = dx * dx + dy * dy;
        return d2 <= size * size && d2 >= 0.3 * size * size;
      }
      case ShapeKind::kCross: {
        const double t = size / 3.0;
        return (std::abs(dx) <= t && std::abs(dy) <= size) || (std::abs(dy) <= t && std::abs(dx) <= size);
      }
      case ShapeKind::kTriangle: {
        double vx[3], vy[3];
        for (int j = 0; j < 3; ++j) {
          const double a = angle + 2.0 * M_PI * j / 3.0;
          vx[j] = cx + 1.25 * size * std::cos(a);
          vy[j] = cy + 1.25 * size * std::sin(a);
        }
        bool neg = false, pos = false;
        for (int j = 0; j < 3; ++j) {
          const int k = (j + 1) % 3;
          const double cross = (vx[k] - vx[j]) * (y - vy[j]) - (vy[k] - vy[j]) * (x - vx[j]);
          neg = neg || cross < 0;
          pos = pos || cross > 0;
        }
        return !(neg && pos);
      }
    }
    return false;
  }
};

void fnv(uint64_t& h, const void* data, size_t n) {
  const auto* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}

}  // namespace

void SyntheticSpec::validate() const {
  if (num_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (height % 32 != 0 || width % 32 != 0 || height <= 0 || width <= 0) {
    throw ConfigError("synthetic canvas must be divisible by 32");
  }
  if (shapes.empty()) throw ConfigError("synthetic dataset needs at least one shape kind");
  if (min_objects < 1 || max_objects < min_objects) throw ConfigError("bad object count range");
  if (!(min_size > 0) || max_size < min_size) throw ConfigError("bad object size range");
  if (train_count < 0 || val_count < 0) throw ConfigError("negative split size");
}

SampleRecord generate_synthetic_sample(const SyntheticSpec& spec, int split, int64_t index) {
  Rng rng(derive_seed({spec.rng_seed, static_cast<uint64_t>(split), static_cast<uint64_t>(index)}));
  const int64_t h = spec.height, w = spec.width, hw = h * w;
  const int k_classes = spec.num_classes;

  SampleRecord rec;
  rec.id = (split == 0 ? "train_" : "val_") + std::to_string(index);
  rec.image = Tensor(Shape{3, h, w});
  // Near-gray background: shared luminance texture plus weaker chroma noise,
  // so object hues stay distinguishable from it.
  const double base = rng.uniform(0.35, 0.65);
  Tensor luma = low_frequency_noise(rng, 1, h, w, 5);
  Tensor chroma = low_frequency_noise(rng, 3, h, w, 5);
  for (int c = 0; c < 3; ++c)
    for (int64_t i = 0; i < hw; ++i) {
      rec.image[c * hw + i] =
          base + spec.texture_amplitude * (luma[i] + 0.3 * chroma[c * hw + i]);
    }

  const int count = static_cast<int>(rng.uniform_int(spec.min_objects, spec.max_objects));
  IntMap owner(h, w, -1);
  std::vector<int> object_class;
  for (int o = 0; o < count; ++o) {
    const int cls = static_cast<int>(rng.uniform_int(0, k_classes - 1));
    const ShapeKind kind = spec.shapes[static_cast<size_t>(cls) % spec.shapes.size()];
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementTries && !placed; ++attempt) {
      ShapeInstance s{kind,
                      rng.uniform(0.15 * w, 0.85 * w),
                      rng.uniform(0.15 * h, 0.85 * h),
                      rng.uniform(spec.min_size, spec.max_size),
                      rng.uniform(0.75, 1.33),
                      rng.uniform(0.0, 2.0 * M_PI)};
      IntMap trial = owner;
      int64_t area = 0;
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
          if (s.contains(x + 0.5, y + 0.5)) {
            trial(y, x) = o;
            ++area;
          }
      if (area == 0) continue;
      // Every earlier object must stay visible.
      std::vector<int64_t> visible(static_cast<size_t>(o), 0);
      for (int32_t v : trial.data)
        if (v >= 0 && v < o) ++visible[v];
      bool ok = true;
      for (int p = 0; p < o; ++p) ok = ok && (object_class[p] < 0 || visible[p] > 0);
      if (!ok) continue;
      owner = std::move(trial);
      placed = true;
    }
    object_class.push_back(placed ? cls : -1);
    if (!placed) continue;

    auto color = class_color(cls, k_classes);
    for (auto& c : color) c = std::clamp(c + spec.color_jitter * rng.uniform(-1.0, 1.0), 0.0, 1.0);
    Tensor tex = low_frequency_noise(rng, 1, h, w, 4);
    for (int64_t i = 0; i < hw; ++i) {
      if (owner.data[i] != o) continue;
      for (int c = 0; c < 3; ++c) rec.image[c * hw + i] = color[c] + 0.5 * spec.texture_amplitude * tex[i];
    }
  }
  for (auto& v : rec.image.values()) v = std::clamp(v, 0.0, 1.0);

  IntMap mask(h, w, 0);
  rec.labels.assign(static_cast<size_t>(k_classes), 0);
  for (int64_t i = 0; i < hw; ++i) {
    const int32_t o = owner.data[i];
    if (o < 0) continue;
    const int cls = object_class[o];
    mask.data[i] = cls + 1;
    rec.labels[cls] = 1;
  }
  rec.gt_mask = std::move(mask);
  return rec;
}

SyntheticSplits generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::vector<SampleRecord> train, val;
  train.reserve(static_cast<size_t>(spec.train_count));
  val.reserve(static_cast<size_t>(spec.val_count));
  for (int64_t i = 0; i < spec.train_count; ++i) train.push_back(generate_synthetic_sample(spec, 0, i));
  for (int64_t i = 0; i < spec.val_count; ++i) val.push_back(generate_synthetic_sample(spec, 1, i));
  return {InMemoryDataset(spec.num_classes, std::move(train)),
          InMemoryDataset(spec.num_classes, std::move(val))};
}

double synthetic_class_presence_probability(const SyntheticSpec& spec) {
  const int span = spec.max_objects - spec.min_objects + 1;
  const double miss = 1.0 - 1.0 / spec.num_classes;
  double p = 0.0;
  for (int n = spec.min_objects; n <= spec.max_objects; ++n) p += (1.0 - std::pow(miss, n)) / span;
  return p;
}

uint64_t dataset_checksum(const Dataset& data) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (int64_t i = 0; i < data.size(); ++i) {
    const SampleRecord r = data.get(i);
    fnv(h, r.id.data(), r.id.size());
    fnv(h, r.image.data(), static_cast<size_t>(r.image.numel()) * sizeof(double));
    fnv(h, r.labels.data(), r.labels.size());
    if (r.gt_mask) fnv(h, r.gt_mask->data.data(), r.gt_mask->data.size() * sizeof(int32_t));
  }
  return h;
}

IntMap resize_nearest(const IntMap& labels, int64_t out_h, int64_t out_w) {
  IntMap out(out_h, out_w);
  for (int64_t y = 0; y < out_h; ++y) {
    const int64_t sy = std::min(labels.height - 1, (2 * y + 1) * labels.height / (2 * out_h));
    for (int64_t x = 0; x < out_w; ++x) {
      const int64_t sx = std::min(labels.width - 1, (2 * x + 1) * labels.width / (2 * out_w));
      out(y, x) = labels(sy, sx);
    }
  }
  return out;
}

IntMap hflip(const IntMap& labels) {
  IntMap out(labels.height, labels.width);
  for (int64_t y = 0; y < labels.height; ++y)
    for (int64_t x = 0; x < labels.width; ++x) out(y, x) = labels(y, labels.width - 1 - x);
  return out;
}

AugmentParams draw_augment(Rng& rng, const AugmentConfig& cfg, int64_t height, int64_t width) {
  AugmentParams p;
  p.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  p.flip = rng.bernoulli(cfg.flip_prob);
  const int64_t sh = std::max<int64_t>(1, std::llround(height * p.scale));
  const int64_t sw = std::max<int64_t>(1, std::llround(width * p.scale));
  p.offset_y = rng.uniform_int(std::min<int64_t>(0, sh - cfg.crop_h), std::max<int64_t>(0, sh - cfg.crop_h));
  p.offset_x = rng.uniform_int(std::min<int64_t>(0, sw - cfg.crop_w), std::max<int64_t>(0, sw - cfg.crop_w));
  return p;
}

SampleRecord apply_augment(const SampleRecord& sample, const AugmentParams& params,
                           const AugmentConfig& cfg) {
  const int64_t sh = std::max<int64_t>(1, std::llround(sample.height() * params.scale));
  const int64_t sw = std::max<int64_t>(1, std::llround(sample.width() * params.scale));
  Tensor img = resize_bilinear(sample.image, sh, sw);
  std::optional<IntMap> mask;
  if (sample.gt_mask) mask = resize_nearest(*sample.gt_mask, sh, sw);
  if (params.flip) {
    img = hflip(img);
    if (mask) mask = hflip(*mask);
  }
  SampleRecord out;
  out.id = sample.id;
  out.labels = sample.labels;
  out.image = Tensor(Shape{3, cfg.crop_h, cfg.crop_w});
  const int64_t chw = cfg.crop_h * cfg.crop_w;
  for (int c = 0; c < 3; ++c) std::fill_n(out.image.data() + c * chw, chw, cfg.pad_pixel[c]);
  if (mask) out.gt_mask = IntMap(cfg.crop_h, cfg.crop_w, kIgnoreLabel);
  for (int64_t y = 0; y < cfg.crop_h; ++y) {
    const int64_t sy = y + params.offset_y;
    if (sy < 0 || sy >= sh) continue;
    for (int64_t x = 0; x < cfg.crop_w; ++x) {
      const int64_t sx = x + params.offset_x;
      if (sx < 0 || sx >= sw) continue;
      for (int c = 0; c < 3; ++c) out.image[c * chw + y * cfg.crop_w + x] = img[(c * sh + sy) * sw + sx];
      if (mask) (*out.gt_mask)(y, x) = (*mask)(sy, sx);
    }
  }
  return out;
}

SampleRecord augment(const SampleRecord& sample, Rng& rng, const AugmentConfig& cfg) {
  return apply_augment(sample, draw_augment(rng, cfg, sample.height(), sample.width()), cfg);
}

VocStyleDataset::VocStyleDataset(std::string root, int num_classes, WarningSink warn)
    : root_(std::move(root)), num_classes_(num_classes), warn_(std::move(warn)) {
  const fs::path list = fs::path(root_) / "labels.txt";
  std::ifstream in(list);
  if (!in) throw DataError("missing label list '" + list.string() + "'");
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    Entry e;
    if (!(ls >> e.id)) continue;
    e.labels.assign(static_cast<size_t>(num_classes), 0);
    std::string tok;
    while (ls >> tok) {
      int k = -1;
      try {
        size_t used = 0;
        k = std::stoi(tok, &used);
        if (used != tok.size()) k = -1;
      } catch (const std::exception&) {
        k = -1;
      }
      if (k < 0 || k >= num_classes) {
        throw DataError("labels.txt line " + std::to_string(lineno) + ": bad class index '" + tok +
                        "' for id '" + e.id + "'");
      }
      e.labels[k] = 1;
    }
    if (!fs::exists(fs::path(root_) / "images" / (e.id + ".png"))) {
      throw DataError("no image file for listed id '" + e.id + "'");
    }
    entries_.push_back(std::move(e));
  }
}

SampleRecord VocStyleDataset::get(int64_t index) const {
  const Entry& e = entries_.at(static_cast<size_t>(index));
  SampleRecord r;
  r.id = e.id;
  r.labels = e.labels;
  r.image = read_png_rgb((fs::path(root_) / "images" / (e.id + ".png")).string());
  const fs::path mask_path = fs::path(root_) / "masks" / (e.id + ".png");
  if (fs::exists(mask_path)) {
    IntMap m = read_png_labels(mask_path.string());
    if (m.height != r.height() || m.width != r.width()) {
      throw DataError("mask for '" + e.id + "' does not match its image size");
    }
    std::vector<uint8_t> seen(static_cast<size_t>(num_classes_), 0);
    for (int32_t v : m.data)
      if (v >= 1 && v <= num_classes_) seen[v - 1] = 1;
    if (seen != e.labels && warn_) {
      warn_("mask of '" + e.id + "' disagrees with labels.txt; using labels.txt");
    }
    r.gt_mask = std::move(m);
  }
  return r;
}

std::unique_ptr<VocStyleDataset> load_voc_style(const std::string& root, int num_classes,
                                                WarningSink warn) {
  return std::make_unique<VocStyleDataset>(root, num_classes, std::move(warn));
}

void write_voc_style(const Dataset& data, const std::string& root) {
  fs::create_directories(fs::path(root) / "images");
  std::ofstream list(fs::path(root) / "labels.txt", std::ios::trunc);
  if (!list) throw DataError("cannot write labels.txt under '" + root + "'");
  for (int64_t i = 0; i < data.size(); ++i) {
    const SampleRecord r = data.get(i);
    write_png_rgb((fs::path(root) / "images" / (r.id + ".png")).string(), r.image);
    list << r.id;
    for (size_t k = 0; k < r.labels.size(); ++k)
      if (r.labels[k]) list << ' ' << k;
    list << '\n';
    if (r.gt_mask) {
      fs::create_directories(fs::path(root) / "masks");
      write_png_labels((fs::path(root) / "masks" / (r.id + ".png")).string(), *r.gt_mask);
    }
  }
}

}  // namespace twinseg
