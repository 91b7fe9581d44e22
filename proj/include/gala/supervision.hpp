#pragma once

// Co-training objective:
//
//   L = CE(logits, y) + lambda * sum_l || R^l/||R^l|| - c(A^l)/||c(A^l)|| ||_2
//
// where c() collapses an attention volume to its per-site channel L2 norm and
// R^l is the importance map blurred, resized to the layer's h x w. Per-sample
// distances are averaged over the batch; samples without a usable map are
// excluded from the attention term.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gala/autodiff.hpp"
#include "gala/backbone.hpp"
#include "gala/errors.hpp"
#include "gala/image.hpp"
#include "json.hpp"

namespace gala {

enum class SupervisionMode {
  clickme,   // attention volumes vs importance maps
  bbox,      // attention volumes vs the map's bounding rectangle
  feature,   // raw dense-path activity vs importance maps
};

inline SupervisionMode parse_supervision(const std::string& s) {
  if (s == "clickme") return SupervisionMode::clickme;
  if (s == "bbox") return SupervisionMode::bbox;
  if (s == "feature") return SupervisionMode::feature;
  throw ContractError("train.supervision: expected clickme|bbox|feature, got '" + s + "'");
}

inline const char* to_string(SupervisionMode m) {
  switch (m) {
    case SupervisionMode::clickme: return "clickme";
    case SupervisionMode::bbox: return "bbox";
    case SupervisionMode::feature: return "feature";
  }
  return "?";
}

struct TrainConfig {
  double lambda = 1.0;
  double base_lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t epochs = 100;
  std::vector<std::size_t> decay_epochs{30, 60, 80, 90};
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::size_t map_blur_kernel = 49;
  ResizeMode resize_mode = ResizeMode::bicubic;
  double epsilon_norm = 1e-8;
  SupervisionMode supervision = SupervisionMode::clickme;
  double bbox_threshold = 0.0;
  bool augment = true;
  std::size_t crop_padding = 2;
  /// Human inter-rater reliability used to scale explained variability.
  double rho_human = 1.0;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ContractError("train." + field + ": " + why);
    };
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail("lambda", "must be a finite nonnegative number");
    if (!(base_lr > 0.0)) fail("base_lr", "must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) fail("weight_decay", "must be nonnegative");
    if (epochs == 0) fail("epochs", "must be positive");
    for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
      if (decay_epochs[i] >= epochs) fail("decay_epochs", "every decay epoch must be < epochs");
      if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1]) fail("decay_epochs", "must be strictly increasing");
    }
    if (batch_size == 0) fail("batch_size", "must be positive");
    if (map_blur_kernel == 0 || map_blur_kernel % 2 == 0) fail("map_blur_kernel", "must be odd");
    if (!(epsilon_norm > 0.0)) fail("epsilon_norm", "must be positive");
    if (!(bbox_threshold >= 0.0)) fail("bbox_threshold", "must be nonnegative");
    if (!(rho_human > 0.0)) fail("rho_human", "must be positive");
  }

  /// Learning rate during `epoch` (0-based): base * 0.1^(#decays <= epoch).
  double learning_rate(std::size_t epoch) const {
    double lr = base_lr;
    for (auto d : decay_epochs)
      if (epoch >= d) lr *= 0.1;
    return lr;
  }

  nlohmann::json to_json() const {
    return {{"lambda", lambda},
            {"base_lr", base_lr},
            {"momentum", momentum},
            {"weight_decay", weight_decay},
            {"epochs", epochs},
            {"decay_epochs", decay_epochs},
            {"batch_size", batch_size},
            {"seed", seed},
            {"map_blur_kernel", map_blur_kernel},
            {"resize_mode", to_string(resize_mode)},
            {"epsilon_norm", epsilon_norm},
            {"supervision", to_string(supervision)},
            {"bbox_threshold", bbox_threshold},
            {"augment", augment},
            {"crop_padding", crop_padding},
            {"rho_human", rho_human}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    const std::string scope = "train";
    detail::reject_unknown(j, scope,
                           {"lambda", "base_lr", "momentum", "weight_decay", "epochs", "decay_epochs", "batch_size",
                            "seed", "map_blur_kernel", "resize_mode", "epsilon_norm", "supervision", "bbox_threshold",
                            "augment", "crop_padding", "rho_human"});
    TrainConfig c;
    detail::read_field(j, scope, "lambda", c.lambda);
    detail::read_field(j, scope, "base_lr", c.base_lr);
    detail::read_field(j, scope, "momentum", c.momentum);
    detail::read_field(j, scope, "weight_decay", c.weight_decay);
    detail::read_field(j, scope, "epochs", c.epochs);
    detail::read_field(j, scope, "decay_epochs", c.decay_epochs);
    detail::read_field(j, scope, "batch_size", c.batch_size);
    detail::read_field(j, scope, "seed", c.seed);
    detail::read_field(j, scope, "map_blur_kernel", c.map_blur_kernel);
    std::string mode = to_string(c.resize_mode);
    detail::read_field(j, scope, "resize_mode", mode);
    c.resize_mode = parse_resize_mode(mode);
    std::string sup = to_string(c.supervision);
    detail::read_field(j, scope, "supervision", sup);
    c.supervision = parse_supervision(sup);
    detail::read_field(j, scope, "epsilon_norm", c.epsilon_norm);
    detail::read_field(j, scope, "bbox_threshold", c.bbox_threshold);
    detail::read_field(j, scope, "augment", c.augment);
    detail::read_field(j, scope, "crop_padding", c.crop_padding);
    detail::read_field(j, scope, "rho_human", c.rho_human);
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------

struct TargetMap {
  Grid<double> values;  // unit L2 norm unless empty
  bool empty = false;   // norm fell below epsilon_norm; excluded from the loss
};

/// Blur, resize to the layer's height/width, then divide by the L2 norm.
inline TargetMap prepare_target_map(const Grid<double>& map, std::size_t height, std::size_t width,
                                    const TrainConfig& cfg) {
  if (map.empty()) throw ContractError("prepare_target_map: empty grid");
  for (double v : map.values()) {
    if (!(v >= 0.0)) throw ContractError("prepare_target_map: importance maps must be nonnegative");
  }
  Grid<double> r = resize(gaussian_blur(map, cfg.map_blur_kernel), height, width, cfg.resize_mode);
  const double norm = l2_norm(r);
  TargetMap out;
  if (norm < cfg.epsilon_norm) {
    out.values = Grid<double>(height, width, 0.0);
    out.empty = true;
    return out;
  }
  for (double& v : r.values()) v /= norm;
  out.values = std::move(r);
  return out;
}

/// Uniform rectangle (value 1) spanning every pixel > threshold; all-zero if none.
inline Grid<double> derive_bbox_map(const Grid<double>& map, double threshold) {
  if (!(threshold >= 0.0)) throw ContractError("derive_bbox_map: threshold must be nonnegative");
  std::size_t r0 = map.height(), r1 = 0, c0 = map.width(), c1 = 0;
  bool any = false;
  for (std::size_t r = 0; r < map.height(); ++r)
    for (std::size_t c = 0; c < map.width(); ++c)
      if (map(r, c) > threshold) {
        any = true;
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
  Grid<double> out(map.height(), map.width(), 0.0);
  if (!any) return out;
  for (std::size_t r = r0; r <= r1; ++r)
    for (std::size_t c = c0; c <= c1; ++c) out(r, c) = 1.0;
  return out;
}

/// Batched targets for one layer: N x h x w x 1 maps plus per-sample weights
/// (0 excludes a sample from the term).
struct LayerTarget {
  Tensor maps;
  std::vector<double> weights;
};

namespace detail {

inline Graph::NodeId layer_distance(Graph& g, Graph::NodeId collapsed, const LayerTarget& t, double eps) {
  const Shape cs = g.value(collapsed).shape();
  if (!(t.maps.shape() == cs)) {
    throw ContractError("map_loss: target shape " + t.maps.shape().str() + " does not match collapsed attention " +
                        cs.str());
  }
  if (t.weights.size() != cs[0]) throw ContractError("map_loss: weight count does not match batch size");
  const auto model = g.unit_normalize(collapsed, eps);
  const auto target = g.unit_normalize(g.constant(t.maps), eps);
  return g.weighted_mean(g.l2_distance(target, model), t.weights);
}

inline Graph::NodeId summed_layer_loss(Graph& g, const std::map<std::size_t, Graph::NodeId>& volumes,
                                       const std::map<std::size_t, LayerTarget>& targets, double eps) {
  if (volumes.empty()) throw ContractError("map_loss: no layers");
  Graph::NodeId total = Graph::kNone;
  for (const auto& [layer, node] : volumes) {
    auto it = targets.find(layer);
    if (it == targets.end()) throw ContractError("map_loss: missing target for layer " + std::to_string(layer));
    const auto term = layer_distance(g, g.channel_l2(node), it->second, eps);
    total = total == Graph::kNone ? term : g.add(total, term);
  }
  return total;
}

}  // namespace detail

/// Attention term of the objective (sum over layers, mean over samples).
inline Graph::NodeId map_loss(Graph& g, const std::map<std::size_t, Graph::NodeId>& attention,
                              const std::map<std::size_t, LayerTarget>& targets, double eps = 1e-12) {
  return detail::summed_layer_loss(g, attention, targets, eps);
}

/// Control: same distance against channel-collapsed raw activity U^l.
inline Graph::NodeId direct_feature_loss(Graph& g, const std::map<std::size_t, Graph::NodeId>& activity,
                                         const std::map<std::size_t, LayerTarget>& targets, double eps = 1e-12) {
  return detail::summed_layer_loss(g, activity, targets, eps);
}

inline Graph::NodeId total_loss(Graph& g, Graph::NodeId logits, std::vector<std::size_t> labels,
                                Graph::NodeId attention_term, double lambda) {
  if (!(lambda >= 0.0)) throw ContractError("total_loss: lambda must be nonnegative");
  const auto ce = g.softmax_cross_entropy(logits, std::move(labels));
  if (lambda == 0.0 || attention_term == Graph::kNone) return ce;
  return g.add(ce, g.scale(attention_term, lambda));
}

// Value-level forms --------------------------------------------------------

namespace detail {
inline std::map<std::size_t, LayerTarget> weighted_targets(const std::map<std::size_t, Tensor>& targets, double eps) {
  std::map<std::size_t, LayerTarget> out;
  for (const auto& [layer, t] : targets) {
    if (t.shape().rank() != 4) throw ContractError("map_loss: targets must be N x h x w x 1");
    const std::size_t N = t.shape()[0], per = t.size() / N;
    LayerTarget lt{t, std::vector<double>(N, 1.0)};
    for (std::size_t n = 0; n < N; ++n) {
      double acc = 0.0;
      for (std::size_t i = n * per; i < (n + 1) * per; ++i) acc += t[i] * t[i];
      if (std::sqrt(acc) < eps) lt.weights[n] = 0.0;
    }
    out.emplace(layer, std::move(lt));
  }
  return out;
}
}  // namespace detail

/// `attention`: A^l volumes (N x h x w x C); `targets`: R^l (N x h x w x 1, any scale).
inline double map_loss(const std::map<std::size_t, Tensor>& attention, const std::map<std::size_t, Tensor>& targets,
                       double epsilon_norm = 1e-8) {
  Graph g;
  std::map<std::size_t, Graph::NodeId> nodes;
  for (const auto& [layer, a] : attention) nodes[layer] = g.constant(a);
  return g.value(map_loss(g, nodes, detail::weighted_targets(targets, epsilon_norm))).item();
}

inline double direct_feature_loss(const std::map<std::size_t, Tensor>& activity,
                                  const std::map<std::size_t, Tensor>& targets, double epsilon_norm = 1e-8) {
  return map_loss(activity, targets, epsilon_norm);
}

inline double total_loss(const Tensor& logits, const std::vector<std::size_t>& labels,
                         const std::map<std::size_t, Tensor>& attention, const std::map<std::size_t, Tensor>& targets,
                         double lambda, double epsilon_norm = 1e-8) {
  Graph g;
  const auto l = g.constant(logits);
  Graph::NodeId term = Graph::kNone;
  if (lambda != 0.0) {
    std::map<std::size_t, Graph::NodeId> nodes;
    for (const auto& [layer, a] : attention) nodes[layer] = g.constant(a);
    term = map_loss(g, nodes, detail::weighted_targets(targets, epsilon_norm));
  }
  return g.value(total_loss(g, l, labels, term, lambda)).item();
}

}  // namespace gala
