#pragma once

// Run configuration (data + model + train), single training runs and lambda
// sweeps. Shared by the command-line tool and the acceptance suite.
//
// Config file layout:
//   {"data":  {"source": "synthetic" | "folder", "synthetic": {...},
//              "train_count": 4000, "val_count": 1000, "test_count": 1000,
//              "train_dir": ..., "val_dir": ..., "test_dir": ...},
//    "model": BackboneConfig, "train": TrainConfig}

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gala/backbone.hpp"
#include "gala/dataset.hpp"
#include "gala/errors.hpp"
#include "gala/metrics.hpp"
#include "gala/supervision.hpp"
#include "gala/synthetic.hpp"
#include "gala/train.hpp"
#include "json.hpp"

namespace gala {

struct DataConfig {
  std::string source = "synthetic";
  SyntheticConfig synthetic;
  std::size_t train_count = 4000, val_count = 1000, test_count = 1000;
  std::string train_dir, val_dir, test_dir;

  void validate() const {
    if (source == "synthetic") {
      if (train_count == 0 || test_count == 0) throw ContractError("data.train_count: train and test splits must be non-empty");
      if (synthetic.size < 8) throw ContractError("data.synthetic.size: must be at least 8");
    } else if (source == "folder") {
      if (train_dir.empty()) throw ContractError("data.train_dir: required for folder data");
    } else {
      throw ContractError("data.source: must be 'synthetic' or 'folder', got '" + source + "'");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json syn = synthetic.to_json();
    syn["count"] = train_count + val_count + test_count;
    return {{"source", source},           {"synthetic", syn},                 {"train_count", train_count},
            {"val_count", val_count},     {"test_count", test_count},         {"train_dir", train_dir},
            {"val_dir", val_dir},         {"test_dir", test_dir}};
  }

  static DataConfig from_json(const nlohmann::json& j) {
    detail::reject_unknown(j, "data",
                           {"source", "synthetic", "train_count", "val_count", "test_count", "train_dir", "val_dir",
                            "test_dir"});
    DataConfig d;
    detail::read_field(j, "data", "source", d.source);
    detail::read_field(j, "data", "train_count", d.train_count);
    detail::read_field(j, "data", "val_count", d.val_count);
    detail::read_field(j, "data", "test_count", d.test_count);
    detail::read_field(j, "data", "train_dir", d.train_dir);
    detail::read_field(j, "data", "val_dir", d.val_dir);
    detail::read_field(j, "data", "test_dir", d.test_dir);
    if (j.contains("synthetic")) {
      const auto& s = j["synthetic"];
      if (!s.is_object()) throw ContractError("data.synthetic: must be an object");
      detail::reject_unknown(s, "data.synthetic",
                             {"count", "size", "seed", "target_min", "target_max", "distractor_min", "distractor_max",
                              "distractors_min", "distractors_max", "noise"});
      auto& y = d.synthetic;
      detail::read_field(s, "data.synthetic", "size", y.size);
      detail::read_field(s, "data.synthetic", "seed", y.seed);
      detail::read_field(s, "data.synthetic", "target_min", y.target_min);
      detail::read_field(s, "data.synthetic", "target_max", y.target_max);
      detail::read_field(s, "data.synthetic", "distractor_min", y.distractor_min);
      detail::read_field(s, "data.synthetic", "distractor_max", y.distractor_max);
      detail::read_field(s, "data.synthetic", "distractors_min", y.distractors_min);
      detail::read_field(s, "data.synthetic", "distractors_max", y.distractors_max);
      detail::read_field(s, "data.synthetic", "noise", y.noise);
    }
    const std::size_t total = d.train_count + d.val_count + d.test_count;
    if (j.contains("synthetic") && j["synthetic"].contains("count") &&
        j["synthetic"]["count"] != nlohmann::json(total)) {
      throw ContractError("data.synthetic.count: must equal train_count + val_count + test_count (" +
                          std::to_string(total) + ")");
    }
    d.synthetic.count = total;
    d.validate();
    return d;
  }
};

struct RunConfig {
  DataConfig data;
  BackboneConfig model;
  TrainConfig train;

  void validate() const {
    data.validate();
    model.validate();
    train.validate();
  }

  nlohmann::json to_json() const { return {{"data", data.to_json()}, {"model", model.to_json()}, {"train", train.to_json()}}; }

  static RunConfig from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ContractError("config: top level must be an object");
    detail::reject_unknown(j, "config", {"data", "model", "train"});
    RunConfig c;
    if (j.contains("data")) c.data = DataConfig::from_json(j["data"]);
    if (j.contains("model")) c.model = BackboneConfig::from_json(j["model"]);
    if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
    c.data.synthetic.count = c.data.train_count + c.data.val_count + c.data.test_count;
    c.validate();
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config '" + path.string() + "'");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ContractError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return from_json(j);
  }
};

struct Splits {
  Dataset train, val, test;
};

/// Synthetic: consecutive blocks train | val | test of one generated set.
inline Splits load_splits(const DataConfig& cfg) {
  cfg.validate();
  Splits s;
  if (cfg.source == "synthetic") {
    SyntheticConfig y = cfg.synthetic;
    y.count = cfg.train_count + cfg.val_count + cfg.test_count;
    Dataset all = make_synthetic(y);
    const auto a = all.begin(), b = a + static_cast<std::ptrdiff_t>(cfg.train_count),
               c = b + static_cast<std::ptrdiff_t>(cfg.val_count);
    s.train.assign(std::make_move_iterator(a), std::make_move_iterator(b));
    s.val.assign(std::make_move_iterator(b), std::make_move_iterator(c));
    s.test.assign(std::make_move_iterator(c), std::make_move_iterator(all.end()));
    return s;
  }
  s.train = load_dataset(cfg.train_dir);
  if (!cfg.val_dir.empty()) s.val = load_dataset(cfg.val_dir);
  s.test = cfg.test_dir.empty() ? s.val : load_dataset(cfg.test_dir);
  if (s.test.empty()) throw DataError("data: no test split (set test_dir or val_dir)");
  return s;
}

/// Mean IOU between upsampled attention maps and the samples' masks.
/// NaN when no sample has both.
inline double mean_attention_iou(const Evaluation& ev, const Dataset& data, ResizeMode mode = ResizeMode::bicubic) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& s : data) {
    if (!s.mask) continue;
    const auto it = ev.model_maps.find(s.id);
    if (it == ev.model_maps.end()) continue;
    if (std::all_of(s.mask->values().begin(), s.mask->values().end(), [](double v) { return v == 0.0; })) continue;
    total += attention_iou(resize(it->second, s.mask->height(), s.mask->width(), mode), *s.mask);
    ++n;
  }
  return n ? total / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

struct RunResult {
  double lambda = 0.0;
  std::uint64_t seed = 0;
  double error = 0.0, top5_error = 0.0;  // test split, percent
  double explained_variability = std::nan("");
  double map_loss = std::nan("");
  double iou = std::nan("");
  std::size_t selected_epoch = 0;
  TrainReport report;
  std::map<std::string, Grid<double>> attention_maps;  // test split, per sample id, attention resolution

  double accuracy() const { return 100.0 - error; }

  nlohmann::json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"lambda", lambda},
            {"seed", seed},
            {"top1_error", error},
            {"top5_error", top5_error},
            {"accuracy", accuracy()},
            {"explained_variability", num(explained_variability)},
            {"map_loss", num(map_loss)},
            {"iou", num(iou)},
            {"selected_epoch", selected_epoch}};
  }
};

struct RunOutput {
  RunResult result;
  Model model;
};

inline RunOutput run_training(const RunConfig& cfg, const Splits& splits, const EpochCallback& on_epoch = {}) {
  const Model initial = build_model(cfg.model, cfg.train.seed);
  FitResult fitted = fit(initial, splits.train, splits.val, cfg.train, on_epoch);
  const Evaluation ev = evaluate(fitted.model, splits.test, cfg.train);
  RunOutput out{{}, std::move(fitted.model)};
  auto& r = out.result;
  r.lambda = cfg.train.lambda;
  r.seed = cfg.train.seed;
  r.error = ev.error;
  r.top5_error = ev.top5_error;
  r.explained_variability = ev.explained_variability;
  r.map_loss = ev.map_loss;
  if (!cfg.model.gala_layers.empty()) r.iou = mean_attention_iou(ev, splits.test);
  r.selected_epoch = fitted.report.selected_epoch;
  r.attention_maps = ev.model_maps;
  r.report = std::move(fitted.report);
  return out;
}

struct SweepRow {
  double lambda = 0.0;
  std::size_t runs = 0;
  double mean_accuracy = 0.0, mean_explained_variability = 0.0, mean_iou = 0.0;

  nlohmann::json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"lambda", lambda},
            {"runs", runs},
            {"mean_accuracy", mean_accuracy},
            {"mean_explained_variability", num(mean_explained_variability)},
            {"mean_iou", num(mean_iou)}};
  }
};

struct SweepResult {
  std::vector<double> lambdas;
  std::vector<std::uint64_t> seeds;
  std::vector<RunResult> runs;  // lambda-major
  std::vector<SweepRow> rows;   // one per lambda, in sweep order

  const RunResult& run(std::size_t lambda_index, std::size_t seed_index) const {
    return runs.at(lambda_index * seeds.size() + seed_index);
  }

  /// Tuned lambda: the positive lambda with the highest mean accuracy (the
  /// larger explained variability on ties). Empty if no positive lambda ran.
  std::optional<double> selected_lambda() const {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!(rows[i].lambda > 0.0)) continue;
      if (!best || rows[i].mean_accuracy > rows[*best].mean_accuracy ||
          (rows[i].mean_accuracy == rows[*best].mean_accuracy &&
           rows[i].mean_explained_variability > rows[*best].mean_explained_variability)) {
        best = i;
      }
    }
    if (!best) return std::nullopt;
    return rows[*best].lambda;
  }

  std::string csv() const {
    std::string out = "lambda,runs,mean_accuracy,mean_explained_variability,mean_iou\n";
    for (const auto& r : rows) {
      out += nlohmann::json(r.lambda).dump() + "," + std::to_string(r.runs) + "," +
             nlohmann::json(r.mean_accuracy).dump() + "," + nlohmann::json(r.mean_explained_variability).dump() + "," +
             nlohmann::json(r.mean_iou).dump() + "\n";
    }
    return out;
  }
};

using RunCallback = std::function<void(const RunResult&)>;

inline SweepResult run_sweep(const RunConfig& base, const Splits& splits, const std::vector<double>& lambdas,
                             const std::vector<std::uint64_t>& seeds, RunCallback on_run = {}) {
  if (lambdas.size() < 2) throw ContractError("sweep: need at least two lambda values");
  if (seeds.empty()) throw ContractError("sweep: need at least one seed");
  for (double l : lambdas)
    if (!(l >= 0.0) || !std::isfinite(l)) throw ContractError("sweep: lambda values must be finite and nonnegative");
  SweepResult out{lambdas, seeds, {}, {}};
  for (double l : lambdas) {
    SweepRow row{l, seeds.size(), 0.0, 0.0, 0.0};
    for (auto seed : seeds) {
      RunConfig cfg = base;
      cfg.train.lambda = l;
      cfg.train.seed = seed;
      auto r = run_training(cfg, splits).result;
      if (on_run) on_run(r);
      row.mean_accuracy += r.accuracy() / static_cast<double>(seeds.size());
      row.mean_explained_variability += r.explained_variability / static_cast<double>(seeds.size());
      row.mean_iou += r.iou / static_cast<double>(seeds.size());
      out.runs.push_back(std::move(r));
    }
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace gala
