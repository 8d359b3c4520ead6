// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Criterion 6 trains 3 seeds x 2 configurations on the
// desk-synth preset and dominates the runtime.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>

#include "support/testing.hpp"
#include "support/tiny_run.hpp"
#include "twinseg/config.hpp"
#include "twinseg/propagation.hpp"
#include "twinseg/train.hpp"

namespace twinseg {
namespace {

using testing::random_tensor;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

Outcome presets_out_of_scope() {
  Outcome o;
  for (const char* name : {"voc-paper", "coco-paper"}) {
    try {
      preset_config(name).validate();
    } catch (const std::exception& e) {
      o.require(false, std::string(name) + ": " + e.what());
    }
  }
  o.detail = o.pass ? "informational: full-scale VOC/COCO numbers are not reproduced at desk scale; "
                      "voc-paper and coco-paper presets load and validate"
                    : o.detail;
  return o;
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2024);
  double worst[4] = {0, 0, 0, 0};
  const int instances = 20;
  for (int t = 0; t < instances; ++t) {
    const int64_t k = rng.uniform_int(1, 3), h = rng.uniform_int(2, 4), w = rng.uniform_int(2, 4);
    std::vector<PseudoLabelMap> y{testing::random_labels(rng, h, w, int(k) + 1, 0.2),
                                  testing::random_labels(rng, h, w, int(k) + 1, 0.2)};
    y[0].data[0] = 0;
    std::vector<ConfidenceMask> m{testing::random_mask(rng, h, w), testing::random_mask(rng, h, w)};
    m[0].mask.data[0] = 1;
    for (auto& mm : m) {
      mm.count = 0;
      for (int32_t v : mm.mask.data) mm.count += v;
    }
    auto c2s = [&](const Var& z) { return loss_c2s(SegMap{softmax_channels(z)}, y, m); };
    worst[0] = std::max(worst[0], testing::check_gradient(c2s, random_tensor(rng, {2, k + 1, h, w}, -2, 2)).max_rel_error);
    auto s2c = [&](const Var& s) { return loss_s2c(SegMap{s, MapSource::kClsBranch}, y, m); };
    worst[1] = std::max(worst[1], testing::check_gradient(s2c, random_tensor(rng, {2, k + 1, h, w}, 0.05, 1.0)).max_rel_error);
    Tensor labels(Shape{2, k + 1});
    for (int64_t i = 0; i < labels.numel(); ++i) labels[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    auto cls = [&](const Var& c) { return loss_cls(c, labels); };
    worst[2] = std::max(worst[2], testing::check_gradient(cls, random_tensor(rng, {2, k + 1}, -4, 4)).max_rel_error);
    const std::vector<PseudoLabelMap> low{testing::random_labels(rng, h, w, 3, 0.2),
                                          testing::random_labels(rng, h, w, 3, 0.2)};
    const Tensor weight = random_tensor(rng, {2}), bias = random_tensor(rng, {1});
    auto aff = [&](const Var& att) {
      return loss_affinity(mlp_affinity(att, Var::constant(weight), Var::constant(bias)), low);
    };
    worst[3] = std::max(worst[3], testing::check_gradient(aff, random_tensor(rng, {2, 2, h * w, h * w}, -2, 2)).max_rel_error);
  }
  Outcome o;
  const char* names[4] = {"loss_c2s", "loss_s2c", "loss_cls", "loss_affinity"};
  for (int i = 0; i < 4; ++i) o.require(worst[i] <= 1e-4, std::string(names[i]) + fmt(" rel error %.3g", worst[i]));
  const double secs = seconds_since(t0);
  o.require(secs < 60.0, fmt("took %.1f s", secs));
  if (o.pass) {
    o.detail = fmt("%g instances per loss, max rel error c2s %.2g s2c %.2g cls %.2g", instances, worst[0], worst[1], worst[2]) +
               fmt(" aff %.2g, %.1f s", worst[3], secs);
  }
  return o;
}

Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(77);
  Outcome o;
  const int instances = 50;
  for (int t = 0; t < instances && o.pass; ++t) {
    const int64_t k = rng.uniform_int(1, 4);
    Tensor s = testing::random_simplex(rng, 1, k + 1, 8, 8);
    s[0] = 0.75;
    s[1] = 0.5;
    const auto y = argmax_labels(s);
    o.require(y[0] == testing::oracle_argmax(s)[0], "argmax_labels");
    const auto mc = mask_confident_cls(SegMap{Var::constant(s), MapSource::kClsBranch}, 0.75);
    const auto mc_want = testing::oracle_mask_cls(s, 0.75);
    o.require(mc[0].mask == mc_want[0].mask && mc[0].count == mc_want[0].count, "mask_confident_cls");
    const auto ms = mask_confident_seg(SegMap{Var::constant(s)}, y, 0.5);
    const auto ms_want = testing::oracle_mask_seg(s, y, 0.5);
    o.require(ms[0].mask == ms_want[0].mask && ms[0].count == ms_want[0].count, "mask_confident_seg");

    const int classes = static_cast<int>(k) + 1;
    const PseudoLabelMap pred = testing::random_labels(rng, 8, 8, classes);
    const IntMap gt = testing::random_labels(rng, 8, 8, classes, 0.1);
    ConfusionMatrix cm(classes);
    accumulate_confusion(pred, gt, cm);
    const auto cm_want = testing::oracle_confusion(pred, gt, classes);
    for (int a = 0; a < classes; ++a)
      for (int b = 0; b < classes; ++b) o.require(cm.at(a, b) == cm_want[a][b], "accumulate_confusion");
    const auto [iou_want, mean_want] = testing::oracle_iou({pred}, {gt}, classes);
    const IouResult got = miou(cm);
    for (int c = 0; c < classes; ++c) {
      const bool same = std::isnan(iou_want[c]) ? std::isnan(got.per_class[c]) : got.per_class[c] == iou_want[c];
      o.require(same, "miou per-class");
    }
    o.require(got.mean == mean_want, "miou mean");
  }
  const double secs = seconds_since(t0);
  o.require(secs < 60.0, fmt("took %.1f s", secs));
  if (o.pass) o.detail = fmt("%g random 8x8 instances, K<=4, exact match; %.2f s", instances, secs);
  return o;
}

Outcome structural_invariants() {
  Outcome o;
  Rng rng(31);
  const Network net(ModelConfig{}, 5);
  ImageBatch batch{random_tensor(rng, {2, 3, 64, 64}, -2, 2), Tensor(Shape{2, 3}, 1.0), {"a", "b"}};
  const MultiLevelFeatures f = extract_features(batch, net.encoder());

  const auto scaled = ofd_scale(f.levels, Var::constant(Tensor(Shape{2, 1, 2, 2}, 1.0)));
  for (int i = 0; i < 4; ++i) o.require(scaled[i].value().storage() == f.levels[i].value().storage(), "OFD unit prior");

  const Tensor bg = random_tensor(rng, {2, 1, 8, 8}, 0.0, 1.0);
  const Var wrapped = bsp_wrap(Var::constant(random_tensor(rng, {2, 3, 8, 8}, 0.0, 1.0)), BackgroundScore{bg});
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t p = 0; p < 64; ++p) o.require(wrapped.value()[b * 4 * 64 + p] == bg[b * 64 + p], "BSP channel 0");

  double convexity = 0.0, column = 0.0;
  const PropagationKernel kernel = PropagationKernel::defaults();
  for (int t = 0; t < 50; ++t) {
    const Tensor scores = random_tensor(rng, {1, 3, 4, 4}, 0.0, 1.0);
    const Tensor rgb = random_tensor(rng, {1, 3, 4, 4}, 0.0, 1.0);
    const Tensor out = par_refine(scores, rgb, kernel);
    for (int64_t c = 0; c < 3; ++c) {
      double lo = 1e9, hi = -1e9;
      for (int64_t p = 0; p < 16; ++p) lo = std::min(lo, scores[c * 16 + p]), hi = std::max(hi, scores[c * 16 + p]);
      for (int64_t p = 0; p < 16; ++p) {
        const double v = out[c * 16 + p];
        convexity = std::max({convexity, lo - v, v - hi});
      }
    }
    // Column sums: a simplex input stays a simplex.
    const Tensor simplex = testing::random_simplex(rng, 1, 3, 4, 4);
    const Tensor ps = par_refine(simplex, rgb, kernel);
    for (int64_t p = 0; p < 16; ++p) column = std::max(column, std::abs(ps[p] + ps[16 + p] + ps[32 + p] - 1.0));
  }
  o.require(convexity <= 1e-6, fmt("par_refine convexity violation %.3g", convexity));
  o.require(column <= 1e-6, fmt("par_refine column sum drift %.3g", column));

  const SegMap seg = segment(f.levels, net.decoder(), net.seg_head(), 64, 64);
  double seg_drift = 0.0;
  const Tensor& sp = seg.probs.value();
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t p = 0; p < 64 * 64; ++p) {
      double sum = 0.0;
      for (int64_t k = 0; k < 4; ++k) sum += sp[(b * 4 + k) * 4096 + p];
      seg_drift = std::max(seg_drift, std::abs(sum - 1.0));
    }
  o.require(seg_drift <= 1e-5, fmt("segmentation softmax column sum drift %.3g", seg_drift));

  double asym = 0.0;
  const Tensor aff = mlp_affinity(f.attention, net.affinity_weight(), net.affinity_bias()).value();
  const int64_t tt = aff.dim(1);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < tt; ++i)
      for (int64_t j = 0; j < tt; ++j) asym = std::max(asym, std::abs(aff.at(b, i, j) - aff.at(b, j, i)));
  o.require(asym <= 1e-6, fmt("affinity asymmetry %.3g", asym));
  if (o.pass) {
    o.detail = fmt("OFD and BSP bit-equal; PAR convexity %.1g, column drift %.1g; softmax drift %.1g", convexity, column,
                   seg_drift) +
               fmt("; affinity asymmetry %.1g", asym);
  }
  return o;
}

double max_abs_grad(const Var& p) {
  if (!p.has_grad()) return 0.0;
  const Tensor g = p.grad();
  return std::max(g.max_value(), -g.min_value());
}

Outcome stop_gradient_and_reduction() {
  Outcome o;
  // Labels and masks built from a parameter carry nothing back to it.
  Rng rng(12);
  Var producer = Var::parameter(random_tensor(rng, {1, 3, 6, 6}));
  const SegMap produced{softmax_channels(producer)};
  const auto y = argmax_labels(produced.probs.value());
  const auto m = mask_confident_cls(produced, 0.4);
  Var consumer = Var::parameter(random_tensor(rng, {1, 3, 6, 6}));
  backward(loss_c2s(SegMap{softmax_channels(consumer)}, y, m));
  o.require(!producer.has_grad() || max_abs_grad(producer) == 0.0, "gradient reached a pseudo-label producer");
  o.require(max_abs_grad(consumer) > 0.0, "consumer received no gradient");

  RunConfig cfg = preset_config("desk-synth");
  cfg.s2c_enabled = cfg.bsp_enabled = cfg.ofd_enabled = false;
  cfg.data.synthetic.train_count = 16;
  cfg.data.synthetic.val_count = 0;
  const auto data = generate_synthetic(cfg.data.synthetic);
  const auto usable = usable_indices(data.train);
  double worst_cls = 0.0, seg_signal = 0.0;
  for (int64_t it : {cfg.supervision.warmup_c2s, cfg.supervision.warmup_s2c + 1, cfg.total_iterations - 1}) {
    TrainState s(cfg);
    StepDetail d;
    compute_losses(*s.network, make_batch(data.train, usable, it, cfg), cfg, it, &d);
    o.require(!d.parts.l_s2c.defined(), "baseline computed the s2c loss");
    s.network->parameters().zero_grad();
    Var seg_losses = scale(d.parts.l_c2s, cfg.supervision.lambda1);
    if (d.parts.l_aff.defined()) seg_losses = add(seg_losses, scale(d.parts.l_aff, cfg.supervision.lambda3));
    backward(seg_losses);
    const Head& head = s.network->cls_head();
    worst_cls = std::max(worst_cls, max_abs_grad(head.weight));
    if (head.bias.defined()) worst_cls = std::max(worst_cls, max_abs_grad(head.bias));
    seg_signal = std::max(seg_signal, max_abs_grad(s.network->seg_head().weight));
  }
  o.require(worst_cls == 0.0, fmt("classification head gradient %.3g from segmentation losses", worst_cls));
  o.require(seg_signal > 0.0, "segmentation head received no gradient");
  if (o.pass) o.detail = fmt("pseudo labels/masks carry no gradient; baseline classifier gradient exactly 0 "
                             "(segmentation head max |g| %.2g)", seg_signal);
  return o;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome desk_ablation() {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig base = preset_config("desk-synth");
  const auto data = generate_synthetic(base.data.synthetic);
  std::vector<double> seed_full, seg_full, seed_base, seg_base;
  for (uint64_t seed : {0, 1, 2}) {
    for (bool full : {true, false}) {
      RunConfig cfg = base;
      cfg.seed = seed;
      cfg.eval_every = cfg.total_iterations;
      if (!full) {
        cfg.s2c_enabled = cfg.bsp_enabled = cfg.ofd_enabled = false;
        cfg.supervision.lambda3 = 0.0;
      }
      TrainState state(cfg);
      run_training(state, data.train, &data.val, cfg, cfg.total_iterations);
      const EvalRecord& e = state.history.evals.back();
      (full ? seed_full : seed_base).push_back(100.0 * e.seed_miou);
      (full ? seg_full : seg_base).push_back(100.0 * e.seg_miou);
      std::printf("  seed %d %-8s seed mIoU %6.2f  seg mIoU %6.2f  (%.0f s elapsed)\n", int(seed),
                  full ? "full" : "c2s-only", 100.0 * e.seed_miou, 100.0 * e.seg_miou, seconds_since(t0));
      std::fflush(stdout);
    }
  }
  const double d_seed = median3(seed_full) - median3(seed_base);
  const double d_seg = median3(seg_full) - median3(seg_base);
  Outcome o;
  o.require(d_seed >= 3.0 && d_seg >= 3.0, "");
  o.detail = fmt("median seed mIoU full %.2f vs c2s-only %.2f (%+.2f); ", median3(seed_full), median3(seed_base), d_seed) +
             fmt("median seg mIoU full %.2f vs c2s-only %.2f (%+.2f); need >= +3.00 on both; ", median3(seg_full),
                 median3(seg_base), d_seg) +
             fmt("%.0f s", seconds_since(t0));
  return o;
}

Outcome staging_conformance() {
  const RunConfig cfg = preset_config("voc-paper");
  Outcome o;
  struct Case {
    int64_t it;
    StageFlags want;
  };
  const Case cases[] = {{0, {false, false, false}},     {1000, {false, false, false}}, {1999, {false, false, false}},
                        {2000, {true, false, false}},   {3000, {true, false, false}},  {3999, {true, false, false}},
                        {4000, {true, true, true}},     {5000, {true, true, true}},    {20000, {true, true, true}}};
  for (const auto& c : cases) {
    o.require(stage_gate(c.it, cfg) == c.want, "iteration " + std::to_string(c.it));
    const EvalOptions e = eval_options(cfg, EvalTarget::kSeed, c.it);
    o.require(e.use_bsp == c.want.bsp_on, "seed evaluation background at iteration " + std::to_string(c.it));
  }
  if (o.pass) o.detail = "voc-paper boundaries 2000 / 4000 / 4000 reproduced exactly";
  return o;
}

Outcome determinism() {
  RunConfig cfg = preset_config("desk-synth");
  const auto data = generate_synthetic(cfg.data.synthetic);
  TrainState a(cfg), b(cfg);
  run_training(a, data.train, nullptr, cfg, 100);
  run_training(b, data.train, nullptr, cfg, 100);
  double curve = 0.0;
  for (size_t i = 0; i < a.history.steps.size(); ++i) {
    const double x = a.history.steps[i].total, y = b.history.steps[i].total;
    curve = std::max(curve, std::abs(x - y) / std::max(std::abs(x), 1e-300));
  }
  const std::filesystem::path dir = std::filesystem::temp_directory_path() / "twinseg_acceptance_ckpt";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "resume.json").string();
  checkpoint_save(b, path);
  TrainState resumed = checkpoint_load(path, cfg);
  run_training(resumed, data.train, nullptr, cfg, 110);
  run_training(a, data.train, nullptr, cfg, 110);
  const double dist = testing::parameter_distance(*a.network, *resumed.network);
  std::filesystem::remove_all(dir);
  Outcome o;
  o.require(a.history.steps.size() == 110 && resumed.history.steps.size() == 110, "history length");
  o.require(curve <= 1e-10, fmt("loss curve divergence %.3g", curve));
  o.require(dist <= 1e-10, fmt("resume parameter distance %.3g", dist));
  if (o.pass) o.detail = fmt("100-step loss curves differ by %.1g (relative); resume after 10 steps differs by %.1g", curve, dist);
  return o;
}

}  // namespace
}  // namespace twinseg

int main(int argc, char** argv) {
  using namespace twinseg;
  // --quick skips the ablation runs; ctest always runs the full set.
  const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"full-scale numbers out of scope", presets_out_of_scope},
      {"gradient suite", gradient_suite},
      {"oracle equivalence", oracle_equivalence},
      {"structural invariants", structural_invariants},
      {"stop-gradient and reduction", stop_gradient_and_reduction},
      {"desk-scale ablation trend", desk_ablation},
      {"staging conformance", staging_conformance},
      {"determinism", determinism},
  };
  int failures = 0, index = 0;
  for (const auto& [name, run] : criteria) {
    ++index;
    if (quick && index == 6) {
      std::printf("SKIP criterion %d (%s): --quick\n", index, name);
      continue;
    }
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failures += !o.pass;
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", index, name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
