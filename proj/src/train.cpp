#include "twinseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "twinseg/errors.hpp"
#include "twinseg/ops.hpp"

namespace twinseg {

namespace {

using json = nlohmann::json;

// Stream tags for derive_seed.
constexpr uint64_t kInitStream = 1;
constexpr uint64_t kAugmentStream = 2;
constexpr uint64_t kShuffleStream = 3;
constexpr uint64_t kTrainerStream = 4;

}  // namespace

void RunConfig::validate() const {
  supervision.validate();
  propagation.kernel().validate();
  if (model.num_classes < 1) throw ConfigError("model.num_classes must be >= 1");
  if (total_iterations <= supervision.warmup_s2c) {
    throw ConfigError("total_iterations (" + std::to_string(total_iterations) +
                      ") must exceed warmup_s2c (" + std::to_string(supervision.warmup_s2c) + ")");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
  if (!(optimizer.lr0 > 0.0)) throw ConfigError("optimizer.lr0 must be > 0");
  if (optimizer.weight_decay < 0.0) throw ConfigError("optimizer.weight_decay must be >= 0");
  if (!(optimizer.poly_power > 0.0)) throw ConfigError("optimizer.poly_power must be > 0");
  if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0) ||
      !(optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
    throw ConfigError("optimizer betas must lie in [0, 1)");
  }
  if (!(optimizer.eps > 0.0)) throw ConfigError("optimizer.eps must be > 0");
  const double beta = propagation.fixed_background;
  if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("propagation.fixed_background must lie in (0, 1)");
  if (augment.crop_h % 32 != 0 || augment.crop_w % 32 != 0 || augment.crop_h <= 0 ||
      augment.crop_w <= 0) {
    throw ConfigError("augment crop size must be a positive multiple of 32");
  }
  if (!(augment.scale_min > 0.0 && augment.scale_min <= augment.scale_max)) {
    throw ConfigError("augment scale range must satisfy 0 < min <= max");
  }
  if (!(seed_eval_scale > 0.0)) throw ConfigError("seed_eval_scale must be positive");
  if (eval_scales.empty()) throw ConfigError("eval_scales must not be empty");
  for (double s : eval_scales) {
    if (!(s > 0.0)) throw ConfigError("eval_scales must be positive");
  }
  if (data.source == "synthetic") {
    data.synthetic.validate();
    if (data.synthetic.num_classes != model.num_classes) {
      throw ConfigError("data.synthetic.num_classes (" + std::to_string(data.synthetic.num_classes) +
                        ") differs from model.num_classes (" + std::to_string(model.num_classes) + ")");
    }
  } else if (data.source != "voc") {
    throw ConfigError("data.source must be 'synthetic' or 'voc', got '" + data.source + "'");
  }
}

double poly_lr(int64_t iteration, const RunConfig& cfg) {
  if (iteration < 0 || iteration > cfg.total_iterations) {
    throw ContractError("poly_lr: iteration " + std::to_string(iteration) + " outside [0, " +
                        std::to_string(cfg.total_iterations) + "]");
  }
  const double frac = static_cast<double>(iteration) / static_cast<double>(cfg.total_iterations);
  return cfg.optimizer.lr0 * std::pow(1.0 - frac, cfg.optimizer.poly_power);
}

StageFlags stage_gate(int64_t iteration, const RunConfig& cfg) {
  const SupervisionConfig& s = cfg.supervision;
  return {iteration >= s.warmup_c2s, iteration >= s.warmup_s2c && cfg.s2c_enabled,
          iteration >= s.bsp_start && cfg.bsp_enabled};
}

void AdamW::step(ParameterStore& params, double lr) {
  auto& entries = params.entries();
  if (m_.empty()) {
    for (const auto& [name, var] : entries) {
      m_.push_back(Tensor::zeros_like(var.value()));
      v_.push_back(Tensor::zeros_like(var.value()));
    }
  }
  if (m_.size() != entries.size()) throw ContractError("optimizer state does not match parameters");
  ++steps_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double decay = 1.0 - lr * cfg_.weight_decay;
  for (size_t i = 0; i < entries.size(); ++i) {
    Var& var = entries[i].second;
    Tensor& p = var.mutable_value();
    const Tensor& g = var.node()->grad;
    const bool has = !g.empty();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (int64_t j = 0; j < p.numel(); ++j) {
      const double gj = has ? g[j] : 0.0;
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      p[j] *= decay;
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
  }
}

TrainState::TrainState(const RunConfig& cfg)
    : network(std::make_unique<Network>(cfg.model, derive_seed({cfg.seed, kInitStream}))),
      optimizer(cfg.optimizer),
      rng(derive_seed({cfg.seed, kTrainerStream})) {
  network->set_ofd_enabled(cfg.ofd_enabled);
}

BranchOutputs forward_branches(const Network& net, const ImageBatch& batch, const RunConfig& cfg,
                               const StageFlags& flags) {
  BranchOutputs o;
  const int64_t h = batch.height(), w = batch.width();
  o.features = extract_features(batch, net.encoder());
  const Var& x4 = o.features.levels[3];
  o.logits = classify_image(x4, net.cls_head());
  o.seed_raw = localization_seed(x4, net.cls_head());
  o.seed = seed_normalize(o.seed_raw);

  std::array<Var, 4> levels = o.features.levels;
  if (cfg.ofd_enabled) {
    Var prior = object_prior(o.seed);
    if (net.config().detach_prior) prior = prior.detach();
    levels = ofd_scale(levels, prior);
  }
  o.seg = segment(levels, net.decoder(), net.seg_head(), h, w);

  const Tensor rgb = batch.rgb();
  const PropagationKernel kernel = cfg.propagation.kernel();
  auto build_cls_map = [&] {
    Var seed_up = upsample_bilinear(o.seed, h, w);
    Var s_hat = flags.bsp_on ? bsp_wrap(seed_up, background_from_segmap(o.seg))
                             : fixed_bg_wrap(seed_up, cfg.propagation.fixed_background);
    return classification_segmap(s_hat, rgb, kernel);
  };
  if (flags.s2c_on) {
    o.cls_map = build_cls_map();
  } else {
    // Nothing back-propagates through the seed map yet; skip recording it.
    NoGradGuard guard;
    o.cls_map = build_cls_map();
  }

  if (cfg.supervision.lambda3 > 0.0) {
    o.affinity = mlp_affinity(o.features.attention, net.affinity_weight(), net.affinity_bias());
  }
  return o;
}

LossReport compute_losses(const Network& net, const ImageBatch& batch, const RunConfig& cfg,
                          int64_t iteration, StepDetail* detail) {
  const StageFlags flags = stage_gate(iteration, cfg);
  StepDetail local;
  StepDetail& d = detail ? *detail : local;
  d.outputs = forward_branches(net, batch, cfg, flags);
  const BranchOutputs& o = d.outputs;

  d.y_c = argmax_labels(filter_absent_classes(o.cls_map.probs.value(), batch.labels));
  d.y_s = argmax_labels(filter_absent_classes(o.seg.probs.value(), batch.labels));
  d.m_c = mask_confident_cls(o.cls_map, cfg.supervision.sigma_c);
  d.m_s = mask_confident_seg(o.seg, d.y_s, cfg.supervision.sigma_s);

  d.parts = LossParts{};
  d.parts.l_cls = loss_cls(o.logits, batch.labels);
  d.parts.l_c2s = loss_c2s(o.seg, d.y_c, d.m_c);
  if (cfg.s2c_enabled) d.parts.l_s2c = loss_s2c(o.cls_map, d.y_s, d.m_s);
  if (o.affinity.defined()) {
    const int64_t lh = o.features.levels[3].dim(2), lw = o.features.levels[3].dim(3);
    std::vector<PseudoLabelMap> low;
    low.reserve(d.y_c.size());
    for (size_t b = 0; b < d.y_c.size(); ++b) {
      low.push_back(reliable_labels_low(d.y_c[b], d.m_c[b], lh, lw));
    }
    d.parts.l_aff = loss_affinity(o.affinity, low);
  }
  return total_loss(d.parts, cfg.supervision, iteration);
}

LossReport train_step(const ImageBatch& batch, TrainState& state, const RunConfig& cfg) {
  validate_batch(batch, true);
  ParameterStore& params = state.network->parameters();
  params.zero_grad();
  const int64_t it = state.iteration;
  const double lr = poly_lr(it, cfg);
  LossReport r = compute_losses(*state.network, batch, cfg, it);
  if (!std::isfinite(r.total)) {
    std::ostringstream os;
    os.precision(17);
    os << "non-finite loss at iteration " << it << ": l_cls=" << r.l_cls << " l_c2s=" << r.l_c2s
       << " l_s2c=" << r.l_s2c << " l_aff=" << r.l_aff << " total=" << r.total;
    throw NonFiniteLossError(os.str());
  }
  backward(r.total_var);
  state.optimizer.step(params, lr);
  state.history.steps.push_back({it, lr, r.l_cls, r.l_c2s, r.l_s2c, r.l_aff, r.total});
  state.iteration = it + 1;
  return r;
}

std::vector<int64_t> usable_indices(const Dataset& data) {
  std::vector<int64_t> out;
  for (int64_t i = 0; i < data.size(); ++i) {
    const SampleRecord r = data.get(i);
    if (std::any_of(r.labels.begin(), r.labels.end(), [](uint8_t v) { return v != 0; })) {
      out.push_back(i);
    }
  }
  return out;
}

ImageBatch to_batch(const std::vector<SampleRecord>& records) {
  if (records.empty()) throw ContractError("to_batch: no records");
  const int64_t n = static_cast<int64_t>(records.size());
  const int64_t h = records[0].height(), w = records[0].width(), hw = h * w;
  const int64_t k = static_cast<int64_t>(records[0].labels.size());
  ImageBatch b{Tensor(Shape{n, 3, h, w}), Tensor(Shape{n, k}), {}};
  for (int64_t i = 0; i < n; ++i) {
    const SampleRecord& r = records[i];
    if (r.height() != h || r.width() != w || static_cast<int64_t>(r.labels.size()) != k) {
      throw DimensionError("to_batch: records differ in size or class count");
    }
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t p = 0; p < hw; ++p) {
        b.pixels[(i * 3 + c) * hw + p] = (r.image[c * hw + p] - kPixelMean[c]) / kPixelStd[c];
      }
    for (int64_t j = 0; j < k; ++j) b.labels.at(i, j) = r.labels[j];
    b.ids.push_back(r.id);
  }
  return b;
}

ImageBatch make_batch(const Dataset& data, const std::vector<int64_t>& usable, int64_t iteration,
                      const RunConfig& cfg) {
  const int64_t n = static_cast<int64_t>(usable.size());
  if (n == 0) throw DataError("training set has no image with a positive label");
  std::vector<SampleRecord> items;
  int64_t cached_epoch = -1;
  std::vector<int64_t> order;
  for (int64_t j = 0; j < cfg.batch_size; ++j) {
    const int64_t pos = iteration * cfg.batch_size + j;
    const int64_t epoch = pos / n;
    if (epoch != cached_epoch) {
      order = usable;
      Rng shuffle(derive_seed({cfg.seed, kShuffleStream, static_cast<uint64_t>(epoch)}));
      for (int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle.uniform_int(0, i)]);
      cached_epoch = epoch;
    }
    const int64_t item = order[pos % n];
    Rng rng(derive_seed({cfg.seed, kAugmentStream, static_cast<uint64_t>(item), static_cast<uint64_t>(epoch)}));
    items.push_back(augment(data.get(item), rng, cfg.augment));
  }
  return to_batch(items);
}

void accumulate_confusion(const PseudoLabelMap& pred, const IntMap& gt, ConfusionMatrix& cm) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DimensionError("accumulate_confusion: prediction " + std::to_string(pred.height) + "×" +
                         std::to_string(pred.width) + " vs ground truth " +
                         std::to_string(gt.height) + "×" + std::to_string(gt.width));
  }
  for (int64_t i = 0; i < pred.size(); ++i) {
    const int32_t p = pred.data[i];
    if (p < 0 || p >= cm.classes) {
      throw ContractError("prediction value " + std::to_string(p) + " is not a class index");
    }
  }
  for (int64_t i = 0; i < gt.size(); ++i) {
    const int32_t g = gt.data[i];
    if (g == kIgnoreLabel) continue;
    if (g < 0 || g >= cm.classes) {
      throw ContractError("ground-truth value " + std::to_string(g) + " is not a class index");
    }
    ++cm.at(g, pred.data[i]);
  }
}

IouResult miou(const ConfusionMatrix& cm) {
  IouResult r;
  double sum = 0.0;
  int valid = 0;
  for (int k = 0; k < cm.classes; ++k) {
    int64_t row = 0, col = 0;
    for (int j = 0; j < cm.classes; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const int64_t denom = row + col - cm.at(k, k);
    if (denom == 0) {
      r.per_class.push_back(std::nan(""));
      continue;
    }
    const double iou = static_cast<double>(cm.at(k, k)) / static_cast<double>(denom);
    r.per_class.push_back(iou);
    sum += iou;
    ++valid;
  }
  r.mean = valid ? sum / valid : 0.0;
  return r;
}

EvalOptions eval_options(const RunConfig& cfg, EvalTarget target, int64_t iteration) {
  EvalOptions o;
  o.target = target;
  o.use_bsp = stage_gate(iteration, cfg).bsp_on;
  o.fixed_background = cfg.propagation.fixed_background;
  o.kernel = cfg.propagation.kernel();
  o.fusion.scales = cfg.eval_scales;
  o.fusion.flip = cfg.eval_flip;
  o.fusion.size_multiple = 32;
  o.seed_scale = cfg.seed_eval_scale;
  return o;
}

namespace {

Tensor normalize_pixels(const Tensor& image) {
  const int64_t hw = image.dim(1) * image.dim(2);
  Tensor px(Shape{1, 3, image.dim(1), image.dim(2)});
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t p = 0; p < hw; ++p) px[c * hw + p] = (image[c * hw + p] - kPixelMean[c]) / kPixelStd[c];
  return px;
}

int64_t round_to(int64_t v, int64_t m) { return std::max<int64_t>(m, (v + m / 2) / m * m); }

// Seed map for one image at its own resolution, before label filtering.
Tensor seed_scores(const InferenceModel& model, const SampleRecord& rec, const EvalOptions& opt) {
  const int64_t h = rec.height(), w = rec.width();
  const int64_t ih = round_to(std::lround(h * opt.seed_scale), 32);
  const int64_t iw = round_to(std::lround(w * opt.seed_scale), 32);
  Tensor rgb = rec.image.reshaped({1, 3, h, w});
  if (ih != h || iw != w) rgb = resize_bilinear(rgb, ih, iw);
  const InferenceOutput out = model.infer(normalize_pixels(rgb.reshaped({3, ih, iw})));
  const Tensor seed_up = resize_bilinear(seed_normalize(out.seed_raw), ih, iw);
  const int64_t k = seed_up.dim(1), hw = ih * iw;
  Tensor wrapped(Shape{1, k + 1, ih, iw});
  for (int64_t p = 0; p < hw; ++p) {
    wrapped[p] = opt.use_bsp ? out.seg_probs[p] : opt.fixed_background;
  }
  std::copy(seed_up.data(), seed_up.data() + k * hw, wrapped.data() + hw);
  Tensor refined = par_refine(wrapped, rgb, opt.kernel);
  for (int64_t i = 0; i < refined.numel(); ++i) refined[i] = std::clamp(refined[i], 0.0, 1.0);
  if (ih != h || iw != w) refined = resize_bilinear(refined, h, w);
  return refined;
}

}  // namespace

EvalReport evaluate(const InferenceModel& model, const Dataset& data, const EvalOptions& options) {
  const int k = model.num_classes();
  EvalReport report{ConfusionMatrix(k + 1), {}, {}};
  for (int64_t i = 0; i < data.size(); ++i) {
    const SampleRecord rec = data.get(i);
    if (!rec.gt_mask) throw ContractError("evaluate: record '" + rec.id + "' has no ground-truth mask");
    if (static_cast<int>(rec.labels.size()) != k) {
      throw DimensionError("evaluate: record '" + rec.id + "' has " +
                           std::to_string(rec.labels.size()) + " labels, model has " +
                           std::to_string(k) + " classes");
    }
    PseudoLabelMap pred;
    if (options.target == EvalTarget::kSeed) {
      // Propagation is linear and shared across channels, so filtering
      // absent classes after it selects the same labels as before it.
      Tensor labels(Shape{1, k});
      for (int j = 0; j < k; ++j) labels[j] = rec.labels[j];
      pred = argmax_labels(filter_absent_classes(seed_scores(model, rec, options), labels))[0];
    } else {
      pred = argmax_labels(fuse_multiscale(model, normalize_pixels(rec.image), options.fusion))[0];
    }
    accumulate_confusion(pred, *rec.gt_mask, report.confusion);
    if (options.keep_masks) report.masks.emplace_back(rec.id, std::move(pred));
  }
  report.iou = miou(report.confusion);
  return report;
}

namespace {

uint64_t fnv1a(const char* bytes, size_t n) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<uint8_t>(bytes[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string container_path(const std::string& manifest) { return manifest + ".bin"; }

}  // namespace

void checkpoint_save(const TrainState& state, const std::string& path) {
  const auto& entries = state.network->parameters().entries();
  const auto& m = state.optimizer.first_moments();
  const auto& v = state.optimizer.second_moments();
  std::vector<std::pair<std::string, const Tensor*>> arrays;
  for (size_t i = 0; i < entries.size(); ++i) arrays.emplace_back("param/" + entries[i].first, &entries[i].second.value());
  for (size_t i = 0; i < m.size(); ++i) arrays.emplace_back("adam_m/" + entries[i].first, &m[i]);
  for (size_t i = 0; i < v.size(); ++i) arrays.emplace_back("adam_v/" + entries[i].first, &v[i]);

  std::string blob;
  json list = json::array();
  for (const auto& [name, t] : arrays) {
    list.push_back({{"name", name}, {"shape", t->shape()}, {"offset", blob.size()}});
    blob.append(reinterpret_cast<const char*>(t->data()), static_cast<size_t>(t->numel()) * sizeof(double));
  }
  json steps = json::array();
  for (const StepRecord& s : state.history.steps) {
    steps.push_back({s.iteration, s.lr, s.l_cls, s.l_c2s, s.l_s2c, s.l_aff, s.total});
  }
  json evals = json::array();
  for (const EvalRecord& e : state.history.evals) evals.push_back({e.iteration, e.seed_miou, e.seg_miou});

  json manifest = {
      {"version", kCheckpointVersion},
      {"iteration", state.iteration},
      {"rng_state", state.rng.state()},
      {"optimizer", {{"steps", state.optimizer.steps()}}},
      {"container", std::filesystem::path(container_path(path)).filename().string()},
      {"container_bytes", blob.size()},
      {"checksum", hex64(fnv1a(blob.data(), blob.size()))},
      {"arrays", list},
      {"history", {{"steps", steps}, {"evals", evals}}},
  };
  std::ofstream bin(container_path(path), std::ios::binary | std::ios::trunc);
  if (!bin) throw DataError("cannot write checkpoint container '" + container_path(path) + "'");
  bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint manifest '" + path + "'");
  out << manifest.dump(1) << '\n';
  if (!out || !bin) throw DataError("failed writing checkpoint '" + path + "'");
}

TrainState checkpoint_load(const std::string& path, const RunConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw CorruptionError("checkpoint manifest '" + path + "' is unreadable: " + e.what());
  }
  try {
    const std::string version = manifest.at("version").get<std::string>();
    if (version != kCheckpointVersion) throw VersionError(version, kCheckpointVersion);

    const std::string bin_path =
        (std::filesystem::path(path).parent_path() / manifest.at("container").get<std::string>()).string();
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw CorruptionError("checkpoint container '" + bin_path + "' is missing");
    std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
    if (blob.size() != manifest.at("container_bytes").get<size_t>()) {
      throw CorruptionError("checkpoint container '" + bin_path + "' has " +
                            std::to_string(blob.size()) + " bytes, manifest expects " +
                            std::to_string(manifest.at("container_bytes").get<size_t>()));
    }
    if (hex64(fnv1a(blob.data(), blob.size())) != manifest.at("checksum").get<std::string>()) {
      throw CorruptionError("checkpoint container '" + bin_path + "' fails its checksum");
    }

    TrainState state(cfg);
    auto& entries = state.network->parameters().entries();
    std::vector<Tensor> m, v;
    size_t next_param = 0;
    for (const json& a : manifest.at("arrays")) {
      const std::string name = a.at("name").get<std::string>();
      const Shape shape = a.at("shape").get<Shape>();
      const size_t offset = a.at("offset").get<size_t>();
      const size_t bytes = static_cast<size_t>(shape_numel(shape)) * sizeof(double);
      if (offset + bytes > blob.size()) throw CorruptionError("array '" + name + "' overruns the container");
      Tensor t(shape);
      std::memcpy(t.data(), blob.data() + offset, bytes);
      const auto slash = name.find('/');
      const std::string kind = name.substr(0, slash), pname = name.substr(slash + 1);
      if (kind == "param") {
        if (next_param >= entries.size() || entries[next_param].first != pname) {
          throw ConfigError("checkpoint parameter '" + pname + "' does not match the configured model");
        }
        if (entries[next_param].second.shape() != shape) {
          throw ConfigError("checkpoint parameter '" + pname + "' has shape " + shape_str(shape) +
                            ", model expects " + shape_str(entries[next_param].second.shape()));
        }
        entries[next_param++].second.mutable_value() = std::move(t);
      } else if (kind == "adam_m") {
        m.push_back(std::move(t));
      } else if (kind == "adam_v") {
        v.push_back(std::move(t));
      } else {
        throw CorruptionError("unknown checkpoint array '" + name + "'");
      }
    }
    if (next_param != entries.size()) throw ConfigError("checkpoint lacks some model parameters");
    if (m.size() != v.size() || (!m.empty() && m.size() != entries.size())) {
      throw CorruptionError("checkpoint optimizer moments are incomplete");
    }
    state.optimizer.first_moments() = std::move(m);
    state.optimizer.second_moments() = std::move(v);
    state.optimizer.set_steps(manifest.at("optimizer").at("steps").get<int64_t>());
    state.iteration = manifest.at("iteration").get<int64_t>();
    state.rng.set_state(manifest.at("rng_state").get<std::string>());
    for (const json& s : manifest.at("history").at("steps")) {
      state.history.steps.push_back({s.at(0).get<int64_t>(), s.at(1).get<double>(), s.at(2).get<double>(),
                                     s.at(3).get<double>(), s.at(4).get<double>(), s.at(5).get<double>(),
                                     s.at(6).get<double>()});
    }
    for (const json& e : manifest.at("history").at("evals")) {
      state.history.evals.push_back({e.at(0).get<int64_t>(), e.at(1).get<double>(), e.at(2).get<double>()});
    }
    return state;
  } catch (const json::exception& e) {
    throw CorruptionError("checkpoint manifest '" + path + "' is malformed: " + e.what());
  }
}

void run_training(TrainState& state, const Dataset& train, const Dataset* val,
                  const RunConfig& cfg, int64_t until, const TrainHooks& hooks) {
  if (until > cfg.total_iterations) {
    throw ContractError("run_training: target iteration exceeds total_iterations");
  }
  const std::vector<int64_t> usable = usable_indices(train);
  while (state.iteration < until) {
    const ImageBatch batch = make_batch(train, usable, state.iteration, cfg);
    const LossReport r = train_step(batch, state, cfg);
    if (hooks.on_step) hooks.on_step(state.history.steps.back(), r);
    const int64_t it = state.iteration;
    const bool due = (cfg.eval_every > 0 && it % cfg.eval_every == 0) || it == cfg.total_iterations;
    if (val && due) {
      state.network->set_ofd_enabled(cfg.ofd_enabled);
      const EvalReport seed = evaluate(*state.network, *val, eval_options(cfg, EvalTarget::kSeed, it));
      const EvalReport seg = evaluate(*state.network, *val, eval_options(cfg, EvalTarget::kSeg, it));
      state.history.evals.push_back({it, seed.iou.mean, seg.iou.mean});
      if (hooks.on_eval) hooks.on_eval(state.history.evals.back(), seed, seg);
    }
  }
}

}  // namespace twinseg
