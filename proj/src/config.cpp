#include "twinseg/config.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "twinseg/errors.hpp"

namespace twinseg {

namespace {

using json = nlohmann::json;

const std::vector<std::pair<ShapeKind, std::string>> kShapeNames{
    {ShapeKind::kDisk, "disk"},
    {ShapeKind::kRectangle, "rectangle"},
    {ShapeKind::kTriangle, "triangle"},
    {ShapeKind::kRing, "ring"},
    {ShapeKind::kCross, "cross"},
};

std::string shape_name(ShapeKind k) {
  for (const auto& [kind, name] : kShapeNames)
    if (kind == k) return name;
  return "disk";
}

ShapeKind shape_kind(const std::string& s) {
  for (const auto& [kind, name] : kShapeNames)
    if (name == s) return kind;
  throw ConfigError("unknown shape '" + s + "'");
}

json to_json(const RunConfig& c) {
  std::vector<std::string> shapes;
  for (ShapeKind k : c.data.synthetic.shapes) shapes.push_back(shape_name(k));
  const SyntheticSpec& s = c.data.synthetic;
  return {
      {"model",
       {{"num_classes", c.model.num_classes},
        {"encoder_widths", c.model.encoder.widths},
        {"attention_heads", c.model.encoder.attention_heads},
        {"decoder_width", c.model.decoder_width},
        {"cls_head_bias", c.model.cls_head_bias},
        {"detach_prior", c.model.detach_prior}}},
      {"supervision",
       {{"sigma_c", c.supervision.sigma_c},
        {"sigma_s", c.supervision.sigma_s},
        {"lambda1", c.supervision.lambda1},
        {"lambda2", c.supervision.lambda2},
        {"lambda3", c.supervision.lambda3},
        {"warmup_c2s", c.supervision.warmup_c2s},
        {"warmup_s2c", c.supervision.warmup_s2c},
        {"bsp_start", c.supervision.bsp_start}}},
      {"propagation",
       {{"dilations", c.propagation.dilations},
        {"sigma_rgb", c.propagation.sigma_rgb},
        {"sigma_pos", c.propagation.sigma_pos},
        {"iterations", c.propagation.iterations},
        {"fixed_background", c.propagation.fixed_background}}},
      {"optimizer",
       {{"lr0", c.optimizer.lr0},
        {"weight_decay", c.optimizer.weight_decay},
        {"poly_power", c.optimizer.poly_power},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps}}},
      {"augment",
       {{"crop_h", c.augment.crop_h},
        {"crop_w", c.augment.crop_w},
        {"scale_min", c.augment.scale_min},
        {"scale_max", c.augment.scale_max},
        {"flip_prob", c.augment.flip_prob},
        {"pad_pixel", c.augment.pad_pixel}}},
      {"data",
       {{"source", c.data.source},
        {"root", c.data.root},
        {"val_root", c.data.val_root},
        {"synthetic",
         {{"num_classes", s.num_classes},
          {"height", s.height},
          {"width", s.width},
          {"shapes", shapes},
          {"min_objects", s.min_objects},
          {"max_objects", s.max_objects},
          {"min_size", s.min_size},
          {"max_size", s.max_size},
          {"texture_amplitude", s.texture_amplitude},
          {"color_jitter", s.color_jitter},
          {"rng_seed", s.rng_seed},
          {"train_count", s.train_count},
          {"val_count", s.val_count}}}}},
      {"total_iterations", c.total_iterations},
      {"batch_size", c.batch_size},
      {"seed", c.seed},
      {"eval_every", c.eval_every},
      {"ofd_enabled", c.ofd_enabled},
      {"bsp_enabled", c.bsp_enabled},
      {"s2c_enabled", c.s2c_enabled},
      {"eval_scales", c.eval_scales},
      {"eval_flip", c.eval_flip},
      {"seed_eval_scale", c.seed_eval_scale},
  };
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& path) {
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config field '" + path + key + "' has the wrong type");
  }
}

RunConfig from_json(const json& j) {
  RunConfig c;
  const json& m = j.at("model");
  read(m, "num_classes", c.model.num_classes, "model.");
  read(m, "encoder_widths", c.model.encoder.widths, "model.");
  read(m, "attention_heads", c.model.encoder.attention_heads, "model.");
  read(m, "decoder_width", c.model.decoder_width, "model.");
  read(m, "cls_head_bias", c.model.cls_head_bias, "model.");
  read(m, "detach_prior", c.model.detach_prior, "model.");
  const json& s = j.at("supervision");
  read(s, "sigma_c", c.supervision.sigma_c, "supervision.");
  read(s, "sigma_s", c.supervision.sigma_s, "supervision.");
  read(s, "lambda1", c.supervision.lambda1, "supervision.");
  read(s, "lambda2", c.supervision.lambda2, "supervision.");
  read(s, "lambda3", c.supervision.lambda3, "supervision.");
  read(s, "warmup_c2s", c.supervision.warmup_c2s, "supervision.");
  read(s, "warmup_s2c", c.supervision.warmup_s2c, "supervision.");
  read(s, "bsp_start", c.supervision.bsp_start, "supervision.");
  const json& p = j.at("propagation");
  read(p, "dilations", c.propagation.dilations, "propagation.");
  read(p, "sigma_rgb", c.propagation.sigma_rgb, "propagation.");
  read(p, "sigma_pos", c.propagation.sigma_pos, "propagation.");
  read(p, "iterations", c.propagation.iterations, "propagation.");
  read(p, "fixed_background", c.propagation.fixed_background, "propagation.");
  const json& o = j.at("optimizer");
  read(o, "lr0", c.optimizer.lr0, "optimizer.");
  read(o, "weight_decay", c.optimizer.weight_decay, "optimizer.");
  read(o, "poly_power", c.optimizer.poly_power, "optimizer.");
  read(o, "beta1", c.optimizer.beta1, "optimizer.");
  read(o, "beta2", c.optimizer.beta2, "optimizer.");
  read(o, "eps", c.optimizer.eps, "optimizer.");
  const json& a = j.at("augment");
  read(a, "crop_h", c.augment.crop_h, "augment.");
  read(a, "crop_w", c.augment.crop_w, "augment.");
  read(a, "scale_min", c.augment.scale_min, "augment.");
  read(a, "scale_max", c.augment.scale_max, "augment.");
  read(a, "flip_prob", c.augment.flip_prob, "augment.");
  read(a, "pad_pixel", c.augment.pad_pixel, "augment.");
  const json& d = j.at("data");
  read(d, "source", c.data.source, "data.");
  read(d, "root", c.data.root, "data.");
  read(d, "val_root", c.data.val_root, "data.");
  const json& y = d.at("synthetic");
  SyntheticSpec& ss = c.data.synthetic;
  read(y, "num_classes", ss.num_classes, "data.synthetic.");
  read(y, "height", ss.height, "data.synthetic.");
  read(y, "width", ss.width, "data.synthetic.");
  std::vector<std::string> shapes;
  read(y, "shapes", shapes, "data.synthetic.");
  ss.shapes.clear();
  for (const auto& name : shapes) ss.shapes.push_back(shape_kind(name));
  read(y, "min_objects", ss.min_objects, "data.synthetic.");
  read(y, "max_objects", ss.max_objects, "data.synthetic.");
  read(y, "min_size", ss.min_size, "data.synthetic.");
  read(y, "max_size", ss.max_size, "data.synthetic.");
  read(y, "texture_amplitude", ss.texture_amplitude, "data.synthetic.");
  read(y, "color_jitter", ss.color_jitter, "data.synthetic.");
  read(y, "rng_seed", ss.rng_seed, "data.synthetic.");
  read(y, "train_count", ss.train_count, "data.synthetic.");
  read(y, "val_count", ss.val_count, "data.synthetic.");
  read(j, "total_iterations", c.total_iterations, "");
  read(j, "batch_size", c.batch_size, "");
  read(j, "seed", c.seed, "");
  read(j, "eval_every", c.eval_every, "");
  read(j, "ofd_enabled", c.ofd_enabled, "");
  read(j, "bsp_enabled", c.bsp_enabled, "");
  read(j, "s2c_enabled", c.s2c_enabled, "");
  read(j, "eval_scales", c.eval_scales, "");
  read(j, "eval_flip", c.eval_flip, "");
  read(j, "seed_eval_scale", c.seed_eval_scale, "");
  return c;
}

// Every key of `patch` must exist in `schema`, recursively through objects.
void check_known(const json& patch, const json& schema, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("config root must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = prefix + it.key();
    if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    const json& sub = schema.at(it.key());
    if (sub.is_object()) {
      if (!it.value().is_object()) throw ConfigError("config key '" + path + "' must be an object");
      check_known(it.value(), sub, path + ".");
    }
  }
}

}  // namespace

std::vector<std::string> preset_names() { return {"voc-paper", "coco-paper", "desk-synth"}; }

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  if (name == "voc-paper") {
    c.model.num_classes = 20;
    c.data.source = "voc";
    c.data.synthetic.num_classes = 20;
    c.augment.crop_h = c.augment.crop_w = 512;
    return c;
  }
  if (name == "coco-paper") {
    c.model.num_classes = 80;
    c.data.source = "voc";
    c.data.synthetic.num_classes = 80;
    c.augment.crop_h = c.augment.crop_w = 512;
    c.total_iterations = 80000;
    c.supervision.lambda1 = c.supervision.lambda2 = c.supervision.lambda3 = 0.1;
    c.supervision.warmup_c2s = 13000;
    c.supervision.warmup_s2c = 15000;
    c.supervision.bsp_start = 15000;
    return c;
  }
  if (name == "desk-synth") {
    c.total_iterations = 2000;
    c.supervision.warmup_c2s = 200;
    c.supervision.warmup_s2c = 400;
    c.supervision.bsp_start = 400;
    c.eval_every = 200;
    // The network sees canvases upsampled 2x so the stride-32 seed grid is
    // 4x4 rather than 2x2.
    c.augment.crop_h = c.augment.crop_w = 128;
    c.augment.scale_min = 1.0;
    c.augment.scale_max = 4.0;
    c.eval_scales = {1.0, 2.0, 3.0};
    c.seed_eval_scale = 2.0;
    c.optimizer.lr0 = 1e-3;
    c.propagation.fixed_background = 0.8;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

std::string config_to_json(const RunConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

RunConfig config_from_json(const std::string& text, const RunConfig& base) {
  json patch;
  try {
    patch = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  json merged = to_json(base);
  check_known(patch, merged, "");
  merged.merge_patch(patch);
  return from_json(merged);
}

RunConfig load_config_file(const std::string& path, const RunConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return config_from_json(ss.str(), base);
  } catch (const ConfigError& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& overrides) {
  json j = to_json(cfg);
  for (const std::string& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + ov + "' is not key=value");
    const std::string key = ov.substr(0, eq), text = ov.substr(eq + 1);
    json* node = &j;
    std::stringstream path(key);
    std::string part;
    while (std::getline(path, part, '.')) {
      if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
      node = &(*node)[part];
    }
    if (node->is_object()) throw ConfigError("config key '" + key + "' names a section, not a field");
    json value;
    try {
      value = json::parse(text);
    } catch (const json::exception&) {
      value = text;
    }
    *node = value;
  }
  return from_json(j);
}

}  // namespace twinseg
