#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "twinseg/data.hpp"
#include "twinseg/model_core.hpp"
#include "twinseg/propagation.hpp"
#include "twinseg/pseudo_labels.hpp"
#include "twinseg/supervision.hpp"

namespace twinseg {

struct OptimizerConfig {
  double lr0 = 6e-5;
  double weight_decay = 0.01;
  double poly_power = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct PropagationConfig {
  std::vector<int> dilations{1, 2, 4, 8};
  double sigma_rgb = 0.3;
  double sigma_pos = 2.0;
  int iterations = 10;
  /// Background score used by fixed_bg_wrap before BSP starts.
  double fixed_background = 0.45;

  PropagationKernel kernel() const {
    return PropagationKernel::dilated(dilations, sigma_rgb, sigma_pos, iterations);
  }
};

struct DataConfig {
  /// "synthetic" or "voc".
  std::string source = "synthetic";
  std::string root;
  std::string val_root;
  SyntheticSpec synthetic;
};

struct RunConfig {
  ModelConfig model;
  SupervisionConfig supervision;
  PropagationConfig propagation;
  OptimizerConfig optimizer;
  AugmentConfig augment;
  DataConfig data;
  int64_t total_iterations = 20000;
  int64_t batch_size = 8;
  uint64_t seed = 0;
  int64_t eval_every = 200;
  bool ofd_enabled = true;
  bool bsp_enabled = true;
  bool s2c_enabled = true;
  std::vector<double> eval_scales{0.5, 1.0, 1.5};
  bool eval_flip = true;
  /// Input scale for seed evaluation; the seed grid is 1/32 of the scaled size.
  double seed_eval_scale = 1.0;

  void validate() const;
};

/// lr0 · (1 - iter/total)^power.
double poly_lr(int64_t iteration, const RunConfig& cfg);

struct StageFlags {
  bool c2s_on = false;
  bool s2c_on = false;
  bool bsp_on = false;
  bool operator==(const StageFlags&) const = default;
};

StageFlags stage_gate(int64_t iteration, const RunConfig& cfg);

/// Decoupled-weight-decay Adam over a ParameterStore.
class AdamW {
 public:
  explicit AdamW(const OptimizerConfig& cfg) : cfg_(cfg) {}
  void step(ParameterStore& params, double lr);

  int64_t steps() const { return steps_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void set_steps(int64_t s) { steps_ = s; }

 private:
  OptimizerConfig cfg_;
  int64_t steps_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

struct StepRecord {
  int64_t iteration = 0;
  double lr = 0.0;
  double l_cls = 0.0;
  double l_c2s = 0.0;
  double l_s2c = 0.0;
  double l_aff = 0.0;
  double total = 0.0;
};

struct EvalRecord {
  int64_t iteration = 0;
  double seed_miou = 0.0;
  double seg_miou = 0.0;
};

struct MetricHistory {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
};

struct TrainState {
  explicit TrainState(const RunConfig& cfg);

  int64_t iteration = 0;
  std::unique_ptr<Network> network;
  AdamW optimizer;
  /// Trainer-level stream for stochastic steps outside the data pipeline.
  Rng rng;
  MetricHistory history;
};

/// Everything a training forward pass produces.
struct BranchOutputs {
  MultiLevelFeatures features;
  Var logits;      // N×K
  Var seed_raw;    // N×K×h×w
  Var seed;        // normalized
  SegMap seg;      // segmentation softmax
  SegMap cls_map;  // refined seed map
  Var affinity;    // N×T×T
};

BranchOutputs forward_branches(const Network& net, const ImageBatch& batch, const RunConfig& cfg,
                               const StageFlags& flags);

/// Intermediate values of one step, for inspection in tests.
struct StepDetail {
  BranchOutputs outputs;
  std::vector<PseudoLabelMap> y_c, y_s;
  std::vector<ConfidenceMask> m_c, m_s;
  LossParts parts;
};

/// Forward pass, pseudo labels, masks and losses, without any update.
LossReport compute_losses(const Network& net, const ImageBatch& batch, const RunConfig& cfg,
                          int64_t iteration, StepDetail* detail = nullptr);

/// One optimizer update; advances state.iteration and appends a StepRecord.
/// Throws NonFiniteLossError with the per-term values on a non-finite loss.
LossReport train_step(const ImageBatch& batch, TrainState& state, const RunConfig& cfg);

/// Batch for `iteration`: items come from a per-epoch shuffle of `usable`
/// and each is augmented from its own (seed, item, epoch) stream, so the
/// result depends only on (cfg.seed, iteration).
ImageBatch make_batch(const Dataset& data, const std::vector<int64_t>& usable, int64_t iteration,
                      const RunConfig& cfg);
/// Indices of records with at least one positive label.
std::vector<int64_t> usable_indices(const Dataset& data);
ImageBatch to_batch(const std::vector<SampleRecord>& records);

/// Counts, rows = ground truth, cols = prediction.
struct ConfusionMatrix {
  explicit ConfusionMatrix(int classes = 0)
      : classes(classes), counts(static_cast<size_t>(classes * classes), 0) {}
  int classes;
  std::vector<int64_t> counts;
  int64_t& at(int g, int p) { return counts[g * classes + p]; }
  int64_t at(int g, int p) const { return counts[g * classes + p]; }
};

void accumulate_confusion(const PseudoLabelMap& pred, const IntMap& gt, ConfusionMatrix& cm);

struct IouResult {
  /// NaN for classes with a zero denominator (excluded from the mean).
  std::vector<double> per_class;
  double mean = 0.0;
};

IouResult miou(const ConfusionMatrix& cm);

enum class EvalTarget { kSeed, kSeg };

struct EvalOptions {
  EvalTarget target = EvalTarget::kSeg;
  bool use_bsp = false;
  double fixed_background = 0.45;
  PropagationKernel kernel = PropagationKernel::defaults();
  FusionOptions fusion;
  double seed_scale = 1.0;
  bool keep_masks = false;
};

struct EvalReport {
  ConfusionMatrix confusion;
  IouResult iou;
  std::vector<std::pair<std::string, PseudoLabelMap>> masks;
};

EvalOptions eval_options(const RunConfig& cfg, EvalTarget target, int64_t iteration);

EvalReport evaluate(const InferenceModel& model, const Dataset& data, const EvalOptions& options);

struct TrainHooks {
  std::function<void(const StepRecord&, const LossReport&)> on_step;
  std::function<void(const EvalRecord&, const EvalReport& seed, const EvalReport& seg)> on_eval;
};

/// Steps until state.iteration == until. Evaluates on `val` (when given)
/// whenever the iteration count reaches a multiple of eval_every, and at
/// the end of the schedule.
void run_training(TrainState& state, const Dataset& train, const Dataset* val,
                  const RunConfig& cfg, int64_t until, const TrainHooks& hooks = {});

inline constexpr const char* kCheckpointVersion = "twinseg-ckpt-1";

/// Writes the manifest to `path` and the array container to `path + ".bin"`.
void checkpoint_save(const TrainState& state, const std::string& path);
TrainState checkpoint_load(const std::string& path, const RunConfig& cfg);

}  // namespace twinseg
