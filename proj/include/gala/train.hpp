#pragma once

// Mini-batch SGD with Nesterov momentum on the co-training objective, plus the
// evaluation helpers shared by training, the CLI and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "gala/autodiff.hpp"
#include "gala/backbone.hpp"
#include "gala/clickme.hpp"
#include "gala/errors.hpp"
#include "gala/image.hpp"
#include "gala/rng.hpp"
#include "gala/supervision.hpp"

namespace gala {

struct Sample {
  std::string id;
  Image image;
  std::size_t label = 0;
  std::optional<Grid<double>> map;   // importance map, same H x W as the image
  std::optional<Grid<double>> mask;  // binary object mask, same H x W as the image
};

using Dataset = std::vector<Sample>;

// ---------------------------------------------------------------------------
// Augmentation: zero-padded random crop followed by an optional left-right
// flip. One Transform is applied to an image and its map alike.

struct Transform {
  std::ptrdiff_t dy = 0, dx = 0;  // crop offset relative to the unpadded origin
  bool flip = false;
};

inline Transform random_transform(Rng& rng, std::size_t padding) {
  Transform t;
  const auto span = 2 * padding + 1;
  t.dy = static_cast<std::ptrdiff_t>(rng.index(span)) - static_cast<std::ptrdiff_t>(padding);
  t.dx = static_cast<std::ptrdiff_t>(rng.index(span)) - static_cast<std::ptrdiff_t>(padding);
  t.flip = rng.coin();
  return t;
}

/// Source pixel for output (r, c), or nullopt when it falls in the padding.
inline std::optional<std::pair<std::size_t, std::size_t>> transform_source(const Transform& t, std::size_t r,
                                                                           std::size_t c, std::size_t height,
                                                                           std::size_t width) {
  const std::size_t cc = t.flip ? width - 1 - c : c;
  const std::ptrdiff_t sr = static_cast<std::ptrdiff_t>(r) + t.dy;
  const std::ptrdiff_t sc = static_cast<std::ptrdiff_t>(cc) + t.dx;
  if (sr < 0 || sc < 0 || sr >= static_cast<std::ptrdiff_t>(height) || sc >= static_cast<std::ptrdiff_t>(width)) {
    return std::nullopt;
  }
  return std::pair{static_cast<std::size_t>(sr), static_cast<std::size_t>(sc)};
}

inline Grid<double> apply_transform(const Transform& t, const Grid<double>& in) {
  Grid<double> out(in.height(), in.width(), 0.0);
  for (std::size_t r = 0; r < in.height(); ++r)
    for (std::size_t c = 0; c < in.width(); ++c)
      if (auto s = transform_source(t, r, c, in.height(), in.width())) out(r, c) = in(s->first, s->second);
  return out;
}

inline Image apply_transform(const Transform& t, const Image& in) {
  Image out(in.height, in.width, in.channels, 0.0);
  for (std::size_t r = 0; r < in.height; ++r)
    for (std::size_t c = 0; c < in.width; ++c)
      if (auto s = transform_source(t, r, c, in.height, in.width))
        for (std::size_t ch = 0; ch < in.channels; ++ch) out.at(r, c, ch) = in.at(s->first, s->second, ch);
  return out;
}

// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;      // mean total objective
  double train_ce = 0.0;
  double train_map_loss = 0.0;  // mean attention term (also tracked when lambda = 0); NaN without maps
  double train_error = 0.0;     // top-1 error on augmented batches, percent
  double val_error = 0.0;       // percent; NaN without a validation set
  double val_map_loss = 0.0;
  double val_explained_variability = 0.0;

  nlohmann::json to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"epoch", epoch},
            {"learning_rate", learning_rate},
            {"train_loss", num(train_loss)},
            {"train_ce", num(train_ce)},
            {"train_map_loss", num(train_map_loss)},
            {"train_error", num(train_error)},
            {"val_error", num(val_error)},
            {"val_map_loss", num(val_map_loss)},
            {"val_explained_variability", num(val_explained_variability)}};
  }
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t selected_epoch = 0;  // best validation accuracy, earliest on ties
  std::vector<double> step_losses;

  nlohmann::json to_json() const {
    nlohmann::json e = nlohmann::json::array();
    for (const auto& r : epochs) e.push_back(r.to_json());
    return {{"epochs", e}, {"selected_epoch", selected_epoch}};
  }
};

struct FitResult {
  TrainReport report;
  Model model;  // weights from the selected epoch
};

// ---------------------------------------------------------------------------
// Evaluation.

/// Spatial layers whose maps are supervised and reported.
inline const std::vector<std::size_t>& supervised_layers(const Model& model) { return model.config().gala_layers; }

struct BatchOutputs {
  Tensor logits;
  std::map<std::size_t, Tensor> attention;
  std::map<std::size_t, Tensor> activity;
};

inline BatchOutputs run_batch(const Model& model, const Tensor& batch) {
  Graph g;
  const auto ids = attach(g, model, false);
  const auto f = build_forward(g, model, g.constant(batch), ids);
  BatchOutputs out;
  out.logits = g.value(f.logits);
  for (const auto& [l, n] : f.attention) out.attention[l] = g.value(n);
  for (const auto& [l, n] : f.activity) out.activity[l] = g.value(n);
  return out;
}

/// Mean over layers of the per-site channel L2 norm, one h x w grid per sample.
inline std::vector<Grid<double>> collapsed_maps(const std::map<std::size_t, Tensor>& volumes) {
  if (volumes.empty()) throw ContractError("collapsed_maps: model has no attention layers");
  std::vector<Grid<double>> out;
  for (const auto& [layer, v] : volumes) {
    const Shape& s = v.shape();
    if (out.empty()) out.assign(s[0], Grid<double>(s[1], s[2], 0.0));
    const std::size_t C = s[3];
    for (std::size_t n = 0; n < s[0]; ++n)
      for (std::size_t i = 0; i < s[1] * s[2]; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          const double a = v[(n * s[1] * s[2] + i) * C + c];
          acc += a * a;
        }
        out[n][i] += std::sqrt(acc) / static_cast<double>(volumes.size());
      }
  }
  return out;
}

inline std::size_t argmax_row(const Tensor& logits, std::size_t n) {
  const std::size_t K = logits.shape()[1];
  std::size_t best = 0;
  for (std::size_t k = 1; k < K; ++k)
    if (logits[n * K + k] > logits[n * K + best]) best = k;
  return best;
}

/// Class indices sorted by decreasing logit (ties: lower index first).
inline std::vector<std::size_t> ranked_classes(const Tensor& logits, std::size_t n) {
  const std::size_t K = logits.shape()[1];
  std::vector<std::size_t> idx(K);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return logits[n * K + a] > logits[n * K + b]; });
  return idx;
}

struct Evaluation {
  double error = 0.0;       // top-1, percent
  double top5_error = 0.0;  // percent
  double map_loss = std::nan("");
  double explained_variability = std::nan("");
  std::vector<std::size_t> predictions;
  std::map<std::string, Grid<double>> model_maps;  // per sample id, attention resolution
  std::map<std::string, Grid<double>> human_maps;  // prepared targets, same resolution
};

inline Evaluation evaluate(const Model& model, const Dataset& data, const TrainConfig& cfg,
                           std::size_t batch_size = 64) {
  if (data.empty()) throw ContractError("evaluate: empty dataset");
  Evaluation ev;
  std::size_t wrong = 0, wrong5 = 0;
  double map_total = 0.0, map_weight = 0.0;
  const bool has_maps = !supervised_layers(model).empty();
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<const Image*> imgs;
    for (std::size_t i = start; i < end; ++i) imgs.push_back(&data[i].image);
    const auto out = run_batch(model, to_batch(imgs));
    for (std::size_t i = start; i < end; ++i) {
      const std::size_t n = i - start;
      const auto pred = argmax_row(out.logits, n);
      ev.predictions.push_back(pred);
      if (pred != data[i].label) ++wrong;
      const auto ranked = ranked_classes(out.logits, n);
      if (std::find(ranked.begin(), ranked.begin() + std::min<std::size_t>(5, ranked.size()), data[i].label) ==
          ranked.begin() + std::min<std::size_t>(5, ranked.size())) {
        ++wrong5;
      }
    }
    if (!has_maps) continue;
    const auto& volumes = cfg.supervision == SupervisionMode::feature ? out.activity : out.attention;
    const auto maps = collapsed_maps(volumes);
    const std::size_t h = maps.front().height(), w = maps.front().width();
    for (std::size_t i = start; i < end; ++i) {
      const auto& s = data[i];
      if (!s.map) continue;
      const auto t = prepare_target_map(*s.map, h, w, cfg);
      const auto& m = maps[i - start];
      ev.model_maps[s.id] = m;
      if (t.empty) continue;
      ev.human_maps[s.id] = t.values;
      // Attention term per sample, summed over layers.
      for (const auto& [layer, v] : volumes) {
        const Shape& vs = v.shape();
        const std::size_t C = vs[3], n = i - start;
        std::vector<double> col(h * w);
        double norm = 0.0;
        for (std::size_t k = 0; k < h * w; ++k) {
          double acc = 0.0;
          for (std::size_t c = 0; c < C; ++c) acc += v[(n * h * w + k) * C + c] * v[(n * h * w + k) * C + c];
          col[k] = std::sqrt(acc);
          norm += acc;
        }
        norm = std::max(std::sqrt(norm), 1e-12);
        double d = 0.0;
        for (std::size_t k = 0; k < h * w; ++k) d += (t.values[k] - col[k] / norm) * (t.values[k] - col[k] / norm);
        map_total += std::sqrt(d);
      }
      map_weight += 1.0;
    }
  }
  ev.error = 100.0 * static_cast<double>(wrong) / static_cast<double>(data.size());
  ev.top5_error = 100.0 * static_cast<double>(wrong5) / static_cast<double>(data.size());
  if (map_weight > 0.0) {
    ev.map_loss = map_total / map_weight;
    try {
      ev.explained_variability = explained_variability(ev.model_maps, ev.human_maps, cfg.rho_human).percentage;
    } catch (const ContractError&) {
      ev.explained_variability = std::nan("");
    }
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Training.

using EpochCallback = std::function<void(const EpochRecord&)>;

namespace detail {

inline void check_dataset(const Model& model, const Dataset& data, const char* what) {
  const auto& cfg = model.config();
  for (const auto& s : data) {
    if (s.image.height != cfg.input_height || s.image.width != cfg.input_width ||
        s.image.channels != cfg.input_channels) {
      throw DataError(std::string(what) + " sample '" + s.id + "' has the wrong image size");
    }
    if (s.label >= cfg.num_classes) throw DataError(std::string(what) + " sample '" + s.id + "' label out of range");
    if (s.map && (s.map->height() != s.image.height || s.map->width() != s.image.width)) {
      throw DataError(std::string(what) + " sample '" + s.id + "' map size differs from its image");
    }
  }
}

inline constexpr double kRunningStatMomentum = 0.1;

/// Updated running mean/var (unbiased) for every normalization layer in a training graph.
inline std::map<std::string, Tensor> running_stats(const Model& model, const Graph& g,
                                                   const std::vector<std::pair<std::string, Graph::NodeId>>& inputs) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, node] : inputs) {
    const Tensor& x = g.value(node);
    const std::size_t C = x.shape().back(), M = x.size() / C;
    std::vector<double> mean(C, 0.0), var(C, 0.0);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t c = 0; c < C; ++c) mean[c] += x[i * C + c];
    for (double& m : mean) m /= static_cast<double>(M);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t c = 0; c < C; ++c) var[c] += (x[i * C + c] - mean[c]) * (x[i * C + c] - mean[c]);
    const double denom = static_cast<double>(std::max<std::size_t>(M, 2) - 1);
    const Tensor& rm = model.param(name + ".running_mean");
    const Tensor& rv = model.param(name + ".running_var");
    std::vector<double> nm(C), nv(C);
    for (std::size_t c = 0; c < C; ++c) {
      nm[c] = (1.0 - kRunningStatMomentum) * rm[c] + kRunningStatMomentum * mean[c];
      nv[c] = (1.0 - kRunningStatMomentum) * rv[c] + kRunningStatMomentum * var[c] / denom;
    }
    out[name + ".running_mean"] = Tensor(rm.shape(), std::move(nm));
    out[name + ".running_var"] = Tensor(rv.shape(), std::move(nv));
  }
  return out;
}

}  // namespace detail

/// Trains a copy of `initial`. Deterministic given cfg.seed.
inline FitResult fit(const Model& initial, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                     const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train.empty()) throw DataError("fit: empty training set");
  detail::check_dataset(initial, train, "train");
  detail::check_dataset(initial, val, "validation");

  Model model = initial;
  const auto& mcfg = model.config();
  const auto [ah, aw] = mcfg.attention_size();
  const bool supervise = !mcfg.gala_layers.empty();

  // Bounding-box control swaps each map for its rectangle once, up front.
  std::vector<std::optional<Grid<double>>> maps(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (!train[i].map) continue;
    maps[i] = cfg.supervision == SupervisionMode::bbox ? derive_bbox_map(*train[i].map, cfg.bbox_threshold)
                                                       : *train[i].map;
  }

  const std::size_t P = model.parameters().size();
  std::vector<std::vector<double>> velocity(P);
  for (std::size_t i = 0; i < P; ++i) velocity[i].assign(model.parameters()[i].value.size(), 0.0);

  Rng rng(cfg.seed);
  Rng order_rng = rng.fork(1);
  Rng aug_rng = rng.fork(2);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  FitResult result;
  double best_acc = -1.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = cfg.learning_rate(epoch);
    order_rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0, ce_sum = 0.0, map_sum = 0.0, map_batches = 0.0;
    std::size_t wrong = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::size_t N = end - start;
      std::vector<Image> images;
      std::vector<std::size_t> labels;
      std::vector<std::optional<Grid<double>>> batch_maps;
      images.reserve(N);
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t i = order[k];
        const Transform t = cfg.augment ? random_transform(aug_rng, cfg.crop_padding) : Transform{};
        images.push_back(cfg.augment ? apply_transform(t, train[i].image) : train[i].image);
        labels.push_back(train[i].label);
        if (maps[i]) batch_maps.push_back(cfg.augment ? apply_transform(t, *maps[i]) : *maps[i]);
        else batch_maps.emplace_back();
      }

      std::vector<const Image*> ptrs;
      for (const auto& im : images) ptrs.push_back(&im);
      Graph g;
      const auto ids = attach(g, model, true);
      ForwardNodes f;
      Graph::NodeId term = Graph::kNone, loss = Graph::kNone;
      try {
        f = build_forward(g, model, g.constant(to_batch(ptrs)), ids, true);
        bool any_map = false;
        for (const auto& m : batch_maps) any_map = any_map || m.has_value();
        if (supervise && any_map) {
          std::vector<double> target(N * ah * aw, 0.0), weights(N, 0.0);
          for (std::size_t n = 0; n < N; ++n) {
            if (!batch_maps[n]) continue;
            const auto tm = prepare_target_map(*batch_maps[n], ah, aw, cfg);
            if (tm.empty) continue;
            weights[n] = 1.0;
            std::copy(tm.values.values().begin(), tm.values.values().end(), target.begin() + n * ah * aw);
          }
          if (std::any_of(weights.begin(), weights.end(), [](double w) { return w > 0.0; })) {
            std::map<std::size_t, LayerTarget> targets;
            const LayerTarget lt{Tensor(Shape{N, ah, aw, 1}, std::move(target)), std::move(weights)};
            for (auto l : mcfg.gala_layers) targets.emplace(l, lt);
            term = cfg.supervision == SupervisionMode::feature ? direct_feature_loss(g, f.activity, targets)
                                                                : map_loss(g, f.attention, targets);
          }
        }

        loss = total_loss(g, f.logits, labels, cfg.lambda > 0.0 ? term : Graph::kNone, cfg.lambda);
      } catch (const NumericError& e) {
        throw NumericError("fit: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(start / cfg.batch_size) + ": " + e.what());
      }
      const double loss_value = g.value(loss).item();
      const Tensor& logits = g.value(f.logits);
      double ce = loss_value;
      if (term != Graph::kNone) {
        const double mv = g.value(term).item();
        if (cfg.lambda > 0.0) ce = loss_value - cfg.lambda * mv;
        map_sum += mv;
        map_batches += 1.0;
      }
      for (std::size_t n = 0; n < N; ++n)
        if (argmax_row(logits, n) != labels[n]) ++wrong;
      loss_sum += loss_value * static_cast<double>(N);
      ce_sum += ce * static_cast<double>(N);
      result.report.step_losses.push_back(loss_value);

      const Gradients grads = g.backward(loss);
      std::vector<Tensor> updated;
      updated.reserve(P);
      const auto stats = detail::running_stats(model, g, f.norm_inputs);
      for (std::size_t p = 0; p < P; ++p) {
        const Tensor& w = model.parameters()[p].value;
        if (Model::is_buffer(model.parameters()[p].name)) {
          auto it = stats.find(model.parameters()[p].name);
          updated.push_back(it == stats.end() ? w : it->second);
          continue;
        }
        const Tensor gr = grads.of(ids[p]);
        std::vector<double> nw = w.to_vector();
        auto& v = velocity[p];
        for (std::size_t i = 0; i < nw.size(); ++i) {
          const double gi = gr[i] + cfg.weight_decay * nw[i];
          v[i] = cfg.momentum * v[i] + gi;
          nw[i] -= rec.learning_rate * (gi + cfg.momentum * v[i]);
          if (!std::isfinite(nw[i])) {
            throw NumericError("fit: parameter '" + model.parameters()[p].name + "' diverged at epoch " +
                               std::to_string(epoch));
          }
        }
        updated.emplace_back(w.shape(), std::move(nw));
      }
      model.set_parameters(std::move(updated));
    }

    const double n_train = static_cast<double>(train.size());
    rec.train_loss = loss_sum / n_train;
    rec.train_ce = ce_sum / n_train;
    rec.train_map_loss = map_batches > 0.0 ? map_sum / map_batches : std::nan("");
    rec.train_error = 100.0 * static_cast<double>(wrong) / n_train;
    rec.val_error = std::nan("");
    rec.val_map_loss = std::nan("");
    rec.val_explained_variability = std::nan("");
    double acc = 100.0 - rec.train_error;
    if (!val.empty()) {
      const auto ev = evaluate(model, val, cfg);
      rec.val_error = ev.error;
      rec.val_map_loss = ev.map_loss;
      rec.val_explained_variability = ev.explained_variability;
      acc = 100.0 - ev.error;
    }
    if (acc > best_acc) {
      best_acc = acc;
      result.report.selected_epoch = epoch;
      result.model = model;
    }
    result.report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace gala
