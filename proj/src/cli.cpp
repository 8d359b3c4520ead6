#include "twinseg/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "twinseg/config.hpp"
#include "twinseg/data.hpp"
#include "twinseg/errors.hpp"
#include "twinseg/image_io.hpp"
#include "twinseg/plot.hpp"
#include "twinseg/train.hpp"

namespace twinseg {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct CommonOptions {
  std::string config_path;
  std::string preset;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
};

RunConfig resolve_config(const CommonOptions& o) {
  RunConfig cfg = o.preset.empty() ? RunConfig{} : preset_config(o.preset);
  if (!o.config_path.empty()) {
    if (!fs::exists(o.config_path)) throw ConfigError("config file '" + o.config_path + "' does not exist");
    cfg = load_config_file(o.config_path, cfg);
  }
  cfg = apply_overrides(cfg, o.overrides);
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw DataError("cannot write '" + path.string() + "'");
  f << text;
}

struct Splits {
  std::unique_ptr<Dataset> train;
  std::unique_ptr<Dataset> val;
};

Splits load_data(const RunConfig& cfg, std::ostream& err) {
  Splits s;
  if (cfg.data.source == "synthetic") {
    SyntheticSplits g = generate_synthetic(cfg.data.synthetic);
    s.train = std::make_unique<InMemoryDataset>(std::move(g.train));
    s.val = std::make_unique<InMemoryDataset>(std::move(g.val));
    return s;
  }
  if (cfg.data.root.empty()) throw ConfigError("data.root is required for data.source=voc");
  auto warn = [&err](const std::string& m) { err << "warning: " << m << '\n'; };
  s.train = load_voc_style(cfg.data.root, cfg.model.num_classes, warn);
  if (!cfg.data.val_root.empty()) s.val = load_voc_style(cfg.data.val_root, cfg.model.num_classes, warn);
  return s;
}

json step_json(const StepRecord& r) {
  return {{"iteration", r.iteration}, {"lr", r.lr},       {"l_cls", r.l_cls}, {"l_c2s", r.l_c2s},
          {"l_s2c", r.l_s2c},         {"l_aff", r.l_aff}, {"total", r.total}};
}

json eval_json(const EvalRecord& r) {
  return {{"iteration", r.iteration}, {"seed_miou", r.seed_miou}, {"seg_miou", r.seg_miou}};
}

std::string class_name(int k) { return k == 0 ? "background" : "class" + std::to_string(k); }

std::string format_iou(double v) {
  if (std::isnan(v)) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v * 100.0;
  return os.str();
}

void write_eval_report(const fs::path& dir, const std::string& target, int64_t iteration,
                       const EvalReport& report, bool masks) {
  std::ostringstream txt;
  txt << "target: " << target << "\niteration: " << iteration << "\n\n";
  txt << std::left << std::setw(14) << "class" << "IoU\n";
  json per_class = json::array();
  for (size_t k = 0; k < report.iou.per_class.size(); ++k) {
    const double v = report.iou.per_class[k];
    txt << std::left << std::setw(14) << class_name(static_cast<int>(k)) << format_iou(v) << '\n';
    per_class.push_back(std::isnan(v) ? json(nullptr) : json(v));
  }
  txt << std::left << std::setw(14) << "mIoU" << format_iou(report.iou.mean) << '\n';
  write_text(dir / (target + "_report.txt"), txt.str());
  json j = {{"target", target},
            {"iteration", iteration},
            {"per_class_iou", per_class},
            {"miou", report.iou.mean},
            {"confusion", report.confusion.counts}};
  write_text(dir / (target + "_report.json"), j.dump(2) + "\n");
  if (masks) {
    const fs::path mdir = dir / (target + "_masks");
    fs::create_directories(mdir);
    for (const auto& [id, m] : report.masks) write_png_labels((mdir / (id + ".png")).string(), m);
  }
}

int cmd_train(const CommonOptions& o, const std::string& resume, int64_t until, std::ostream& out,
              std::ostream& err) {
  const RunConfig cfg = resolve_config(o);
  const fs::path dir(o.out_dir);
  fs::create_directories(dir);
  write_text(dir / "config.json", config_to_json(cfg));
  Splits data = load_data(cfg, err);

  TrainState state = resume.empty() ? TrainState(cfg) : checkpoint_load(resume, cfg);
  const int64_t target = until > 0 ? std::min(until, cfg.total_iterations) : cfg.total_iterations;

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::trunc | std::ios::binary);
  std::ofstream evals(dir / "eval.jsonl", std::ios::trunc | std::ios::binary);
  if (!metrics || !evals) throw DataError("cannot write logs under '" + dir.string() + "'");
  for (const StepRecord& r : state.history.steps) metrics << step_json(r).dump() << '\n';
  for (const EvalRecord& r : state.history.evals) evals << eval_json(r).dump() << '\n';

  const auto start = std::chrono::steady_clock::now();
  TrainHooks hooks;
  hooks.on_step = [&](const StepRecord& r, const LossReport&) {
    metrics << step_json(r).dump() << '\n';
    if ((r.iteration + 1) % 100 == 0) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      err << "iter " << r.iteration + 1 << " loss " << r.total << " (" << std::fixed
          << std::setprecision(1) << secs << "s)" << std::defaultfloat << std::setprecision(6) << '\n';
    }
  };
  hooks.on_eval = [&](const EvalRecord& r, const EvalReport& seed, const EvalReport& seg) {
    evals << eval_json(r).dump() << '\n';
    evals.flush();
    metrics.flush();
    write_eval_report(dir, "seed", r.iteration, seed, false);
    write_eval_report(dir, "seg", r.iteration, seg, false);
    checkpoint_save(state, (dir / "checkpoint.json").string());
    out << "eval @" << r.iteration << ": seed mIoU " << format_iou(r.seed_miou) << ", seg mIoU "
        << format_iou(r.seg_miou) << '\n';
  };
  run_training(state, *data.train, data.val.get(), cfg, target, hooks);
  metrics.flush();
  checkpoint_save(state, (dir / "checkpoint.json").string());
  out << "trained to iteration " << state.iteration << "; outputs in " << dir.string() << '\n';
  return kExitOk;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint, EvalTarget target,
             std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve_config(o);
  if (checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const fs::path dir(o.out_dir);
  fs::create_directories(dir);
  write_text(dir / "config.json", config_to_json(cfg));
  Splits data = load_data(cfg, err);
  if (!data.val) throw ConfigError("evaluation needs a validation split (data.val_root)");
  for (int64_t i = 0; i < data.val->size(); ++i) {
    if (!data.val->get(i).gt_mask) throw DataError("record '" + data.val->id(i) + "' has no ground-truth mask");
  }
  TrainState state = checkpoint_load(checkpoint, cfg);
  state.network->set_ofd_enabled(cfg.ofd_enabled);
  EvalOptions opt = eval_options(cfg, target, state.iteration);
  opt.keep_masks = true;
  const EvalReport report = evaluate(*state.network, *data.val, opt);
  const std::string name = target == EvalTarget::kSeed ? "seed" : "seg";
  write_eval_report(dir, name, state.iteration, report, true);
  out << name << " mIoU " << format_iou(report.iou.mean) << '\n';
  return kExitOk;
}

int cmd_synth_gen(const CommonOptions& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const fs::path dir(o.out_dir);
  fs::create_directories(dir);
  write_text(dir / "config.json", config_to_json(cfg));
  const SyntheticSplits g = generate_synthetic(cfg.data.synthetic);
  write_voc_style(g.train, (dir / "train").string());
  write_voc_style(g.val, (dir / "val").string());
  std::ostringstream sums;
  sums << "train " << std::hex << std::setw(16) << std::setfill('0') << dataset_checksum(g.train) << '\n'
       << "val " << std::setw(16) << dataset_checksum(g.val) << '\n';
  write_text(dir / "checksums.txt", sums.str());
  out << sums.str();
  return kExitOk;
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read '" + path.string() + "'");
  std::vector<json> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception&) {
      throw DataError("malformed line in '" + path.string() + "'");
    }
  }
  return rows;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out_dir, std::ostream& out) {
  if (runs.empty()) throw ConfigError("report needs at least one --run DIR");
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  std::vector<Series> loss, seed, seg;
  std::ostringstream table, legend;
  table << "| run | seed mIoU | seg mIoU |\n|---|---|---|\n";
  for (size_t i = 0; i < runs.size(); ++i) {
    const fs::path run(runs[i]);
    const std::string name = fs::path(runs[i]).lexically_normal().filename().string().empty()
                                 ? fs::path(runs[i]).lexically_normal().parent_path().filename().string()
                                 : fs::path(runs[i]).lexically_normal().filename().string();
    Series l{name, {}}, s{name, {}}, g{name, {}};
    for (const json& r : read_jsonl(run / "metrics.jsonl")) {
      l.points.emplace_back(r.at("iteration").get<double>(), r.at("total").get<double>());
    }
    const std::vector<json> ev = read_jsonl(run / "eval.jsonl");
    for (const json& r : ev) {
      s.points.emplace_back(r.at("iteration").get<double>(), r.at("seed_miou").get<double>());
      g.points.emplace_back(r.at("iteration").get<double>(), r.at("seg_miou").get<double>());
    }
    const std::string seed_cell = ev.empty() ? "-" : format_iou(ev.back().at("seed_miou").get<double>());
    const std::string seg_cell = ev.empty() ? "-" : format_iou(ev.back().at("seg_miou").get<double>());
    table << "| " << name << " | " << seed_cell << " | " << seg_cell << " |\n";
    const auto c = plot_color(i);
    legend << name << " rgb(" << int(c[0]) << "," << int(c[1]) << "," << int(c[2]) << ")\n";
    loss.push_back(std::move(l));
    seed.push_back(std::move(s));
    seg.push_back(std::move(g));
  }
  write_text(dir / "ablation.md", table.str());
  write_text(dir / "legend.txt", legend.str());
  write_line_plot((dir / "loss.png").string(), loss);
  write_line_plot((dir / "seed_miou.png").string(), seed);
  write_line_plot((dir / "seg_miou.png").string(), seg);
  out << table.str();
  return kExitOk;
}

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "JSON config file");
  cmd->add_option("--preset", o.preset, "Base preset")
      ->check(CLI::IsMember(preset_names()));
  cmd->add_option("--set", o.overrides, "Override key=value (dotted path), repeatable");
  cmd->add_option("--out", o.out_dir, "Output directory");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"twinseg: weakly supervised segmentation trainer"};
  app.require_subcommand(1);
  CommonOptions opts;
  std::string resume, checkpoint;
  int64_t until = 0;
  std::vector<std::string> runs;

  auto* train = app.add_subcommand("train", "Train and log metrics, checkpoints");
  add_common(train, opts);
  train->add_option("--resume", resume, "Checkpoint manifest to resume from");
  train->add_option("--until", until, "Stop after this iteration");
  auto* eval = app.add_subcommand("eval", "Segmentation-branch IoU report");
  add_common(eval, opts);
  eval->add_option("--checkpoint", checkpoint, "Checkpoint manifest")->required();
  auto* seed_eval = app.add_subcommand("seed-eval", "Localization-seed IoU report");
  add_common(seed_eval, opts);
  seed_eval->add_option("--checkpoint", checkpoint, "Checkpoint manifest")->required();
  auto* synth = app.add_subcommand("synth-gen", "Write the synthetic dataset to disk");
  add_common(synth, opts);
  auto* report = app.add_subcommand("report", "Ablation table and curves from run directories");
  report->add_option("--run", runs, "Run directory, repeatable")->required();
  report->add_option("--out", opts.out_dir, "Output directory");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(opts, resume, until, out, err);
    if (eval->parsed()) return cmd_eval(opts, checkpoint, EvalTarget::kSeg, out, err);
    if (seed_eval->parsed()) return cmd_eval(opts, checkpoint, EvalTarget::kSeed, out, err);
    if (synth->parsed()) return cmd_synth_gen(opts, out);
    if (report->parsed()) return cmd_report(runs, opts.out_dir, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const CorruptionError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const VersionError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NonFiniteLossError& e) {
    err << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace twinseg
