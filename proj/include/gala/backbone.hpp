#pragma once

// Desk-scale pre-activation residual network with GALA modules on the dense
// path of selected blocks:
//
//   h        = relu(norm1(x))
//   shortcut = x                      (or 1x1 projection of h when shape changes)
//   U        = conv2(relu(norm2(conv1(h))))
//   out      = shortcut + gala(U)     (shortcut + U for blocks without GALA)
//
// norm = batch normalization: per-channel standardization with batch statistics
// while training and running averages at inference, then a learned affine.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "gala/autodiff.hpp"
#include "gala/errors.hpp"
#include "gala/gala_module.hpp"
#include "gala/rng.hpp"
#include "gala/tensor.hpp"
#include "json.hpp"

namespace gala {

struct BlockSpec {
  std::size_t index = 0;
  std::size_t in_channels = 0, out_channels = 0;
  std::size_t stride = 1;
  std::size_t out_height = 0, out_width = 0;
  bool projection = false;
  bool gala = false;
};

struct BackboneConfig {
  std::size_t input_height = 32;
  std::size_t input_width = 32;
  std::size_t input_channels = 3;
  std::size_t stem_width = 8;
  std::size_t stem_stride = 2;
  std::vector<std::size_t> stage_widths{8, 16};
  std::vector<std::size_t> blocks_per_stage{1, 2};
  std::vector<std::size_t> gala_layers{1, 2};
  std::size_t num_classes = 10;
  std::size_t reduction = 4;
  bool gala_local = true;

  std::size_t block_count() const {
    std::size_t n = 0;
    for (auto b : blocks_per_stage) n += b;
    return n;
  }

  bool has_gala(std::size_t block) const {
    return std::find(gala_layers.begin(), gala_layers.end(), block) != gala_layers.end();
  }

  std::vector<BlockSpec> blocks() const {
    std::vector<BlockSpec> out;
    std::size_t h = (input_height + stem_stride - 1) / std::max<std::size_t>(stem_stride, 1);
    std::size_t w = (input_width + stem_stride - 1) / std::max<std::size_t>(stem_stride, 1);
    std::size_t channels = stem_width;
    for (std::size_t s = 0; s < stage_widths.size(); ++s) {
      for (std::size_t b = 0; b < blocks_per_stage[s]; ++b) {
        BlockSpec spec;
        spec.index = out.size();
        spec.in_channels = channels;
        spec.out_channels = stage_widths[s];
        spec.stride = (s > 0 && b == 0) ? 2 : 1;
        h = (h + spec.stride - 1) / spec.stride;
        w = (w + spec.stride - 1) / spec.stride;
        spec.out_height = h;
        spec.out_width = w;
        spec.projection = spec.stride != 1 || spec.in_channels != spec.out_channels;
        spec.gala = has_gala(spec.index);
        channels = spec.out_channels;
        out.push_back(spec);
      }
    }
    return out;
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ContractError("BackboneConfig." + field + ": " + why);
    };
    if (input_height == 0 || input_width == 0) fail("input_height", "input size must be positive");
    if (input_channels == 0) fail("input_channels", "must be positive");
    if (stem_width == 0) fail("stem_width", "must be positive");
    if (stem_stride == 0) fail("stem_stride", "must be positive");
    if (stage_widths.empty()) fail("stage_widths", "at least one stage required");
    if (stage_widths.size() != blocks_per_stage.size()) {
      fail("blocks_per_stage", "length must equal stage_widths length");
    }
    for (auto w : stage_widths)
      if (w == 0) fail("stage_widths", "widths must be positive");
    if (num_classes < 2) fail("num_classes", "need at least two classes");
    if (reduction == 0) fail("reduction", "must be positive");
    const auto specs = blocks();
    std::set<std::size_t> seen;
    std::size_t gh = 0, gw = 0;
    for (auto l : gala_layers) {
      if (!seen.insert(l).second) fail("gala_layers", "duplicate block index " + std::to_string(l));
      if (l >= specs.size()) fail("gala_layers", "block " + std::to_string(l) + " does not exist");
      const auto& b = specs[l];
      if (b.out_channels % reduction != 0) {
        fail("gala_layers", "block " + std::to_string(l) + " has " + std::to_string(b.out_channels) +
                                " channels, not divisible by reduction " + std::to_string(reduction));
      }
      if (gh == 0) {
        gh = b.out_height;
        gw = b.out_width;
      } else if (gh != b.out_height || gw != b.out_width) {
        fail("gala_layers", "GALA blocks must share one spatial size");
      }
    }
  }

  /// Spatial size of the attention volumes (0x0 when there are no GALA blocks).
  std::pair<std::size_t, std::size_t> attention_size() const {
    for (const auto& b : blocks())
      if (b.gala) return {b.out_height, b.out_width};
    return {0, 0};
  }

  nlohmann::json to_json() const {
    return {{"input_height", input_height},   {"input_width", input_width},   {"input_channels", input_channels},
            {"stem_width", stem_width},       {"stem_stride", stem_stride},   {"stage_widths", stage_widths},
            {"blocks_per_stage", blocks_per_stage}, {"gala_layers", gala_layers}, {"num_classes", num_classes},
            {"reduction", reduction},         {"gala_local", gala_local}};
  }

  static BackboneConfig from_json(const nlohmann::json& j);
};

namespace detail {

// Reads optional field `key` into `out`, naming the field on type errors.
template <typename T>
void read_field(const nlohmann::json& j, const std::string& scope, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ContractError(scope + "." + key + ": wrong type (" + j.at(key).dump() + ")");
  }
  if constexpr (std::is_arithmetic_v<T> && !std::is_same_v<T, bool>) {
    if (!j.at(key).is_number()) throw ContractError(scope + "." + key + ": expected a number");
    if constexpr (std::is_unsigned_v<T>) {
      if (!j.at(key).is_number_unsigned()) throw ContractError(scope + "." + key + ": expected a nonnegative integer");
    }
  }
}

inline void reject_unknown(const nlohmann::json& j, const std::string& scope, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ContractError(scope + ": expected a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* key) { return k == key; })) {
      throw ContractError(scope + "." + k + ": unknown field");
    }
  }
}

}  // namespace detail

inline BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  const std::string scope = "model";
  detail::reject_unknown(j, scope,
                         {"input_height", "input_width", "input_channels", "stem_width", "stem_stride", "stage_widths",
                          "blocks_per_stage", "gala_layers", "num_classes", "reduction", "gala_local"});
  BackboneConfig c;
  detail::read_field(j, scope, "input_height", c.input_height);
  detail::read_field(j, scope, "input_width", c.input_width);
  detail::read_field(j, scope, "input_channels", c.input_channels);
  detail::read_field(j, scope, "stem_width", c.stem_width);
  detail::read_field(j, scope, "stem_stride", c.stem_stride);
  detail::read_field(j, scope, "stage_widths", c.stage_widths);
  detail::read_field(j, scope, "blocks_per_stage", c.blocks_per_stage);
  detail::read_field(j, scope, "gala_layers", c.gala_layers);
  detail::read_field(j, scope, "num_classes", c.num_classes);
  detail::read_field(j, scope, "reduction", c.reduction);
  detail::read_field(j, scope, "gala_local", c.gala_local);
  c.validate();
  return c;
}

struct NamedTensor {
  std::string name;
  Tensor value;
};

class Model {
 public:
  Model() = default;
  Model(BackboneConfig config, std::vector<NamedTensor> params) : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
    for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
  }

  const BackboneConfig& config() const { return config_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }

  /// Normalization running statistics: stored with the weights, never trained.
  static bool is_buffer(const std::string& name) {
    auto ends = [&](const char* suffix) {
      const std::string s(suffix);
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return ends(".running_mean") || ends(".running_var");
  }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("Model: no parameter '" + name + "'");
    return it->second;
  }
  const Tensor& param(const std::string& name) const { return params_[index_of(name)].value; }

  void set_param(const std::string& name, Tensor value) {
    auto& slot = params_[index_of(name)].value;
    if (!(slot.shape() == value.shape())) {
      throw ContractError("Model: parameter '" + name + "' expected " + slot.shape().str() + ", got " +
                          value.shape().str());
    }
    slot = std::move(value);
  }

  void set_parameters(std::vector<Tensor> values) {
    if (values.size() != params_.size()) throw ContractError("Model: parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) set_param(params_[i].name, std::move(values[i]));
  }

  GalaParams gala(std::size_t layer) const {
    if (!config_.has_gala(layer)) throw ContractError("Model: block " + std::to_string(layer) + " has no GALA module");
    GalaParams p;
    p.channels = config_.blocks()[layer].out_channels;
    p.reduction = config_.reduction;
    p.use_local = config_.gala_local;
    const std::string prefix = "block" + std::to_string(layer) + ".gala.";
    GalaParams::visit(p, [&](const char* field, Tensor& t) { t = param(prefix + field); });
    return p;
  }

 private:
  BackboneConfig config_;
  std::vector<NamedTensor> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline Model build_model(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  std::vector<NamedTensor> params;
  auto normal = [&](Shape s, double stddev) {
    std::vector<double> v(s.numel());
    for (double& x : v) x = rng.normal(0.0, stddev);
    return Tensor(s, std::move(v));
  };
  auto conv = [&](const std::string& name, std::size_t k, std::size_t cin, std::size_t cout) {
    params.push_back({name + ".kernel", normal({k, k, cin, cout}, std::sqrt(2.0 / static_cast<double>(k * k * cin)))});
  };
  auto affine = [&](const std::string& name, std::size_t c) {
    params.push_back({name + ".gamma", Tensor::full({c}, 1.0)});
    params.push_back({name + ".beta", Tensor::zeros({c})});
    params.push_back({name + ".running_mean", Tensor::zeros({c})});
    params.push_back({name + ".running_var", Tensor::full({c}, 1.0)});
  };

  conv("stem", 3, config.input_channels, config.stem_width);
  for (const auto& b : config.blocks()) {
    const std::string p = "block" + std::to_string(b.index);
    affine(p + ".norm1", b.in_channels);
    if (b.projection) conv(p + ".shortcut", 1, b.in_channels, b.out_channels);
    conv(p + ".conv1", 3, b.in_channels, b.out_channels);
    affine(p + ".norm2", b.out_channels);
    conv(p + ".conv2", 3, b.out_channels, b.out_channels);
    if (b.gala) {
      const auto g = GalaParams::init(b.out_channels, config.reduction, rng, config.gala_local);
      GalaParams::visit(g, [&](const char* field, const Tensor& t) { params.push_back({p + ".gala." + field, t}); });
    }
  }
  const std::size_t last = config.stage_widths.back();
  affine("head.norm", last);
  params.push_back({"head.dense.weight", normal({last, config.num_classes}, std::sqrt(1.0 / static_cast<double>(last)))});
  params.push_back({"head.dense.bias", Tensor::zeros({config.num_classes})});
  return Model(config, std::move(params));
}

/// Model parameters registered in a graph, indexed like Model::parameters().
inline std::vector<Graph::NodeId> attach(Graph& g, const Model& model, bool trainable) {
  std::vector<Graph::NodeId> ids;
  ids.reserve(model.parameters().size());
  for (const auto& p : model.parameters())
    ids.push_back(trainable && !Model::is_buffer(p.name) ? g.parameter(p.value) : g.constant(p.value));
  return ids;
}

struct ForwardNodes {
  Graph::NodeId logits = Graph::kNone;
  std::map<std::size_t, Graph::NodeId> attention;  // A^l, N x h x w x C
  std::map<std::size_t, Graph::NodeId> activity;   // dense-path U^l before modulation
  std::vector<Graph::NodeId> block_outputs;
  /// Inputs of each normalization layer (training mode), for running statistics.
  std::vector<std::pair<std::string, Graph::NodeId>> norm_inputs;
};

inline constexpr double kBatchNormEps = 1e-5;

/// `training`: normalize with batch statistics; otherwise with running averages.
inline ForwardNodes build_forward(Graph& g, const Model& model, Graph::NodeId input,
                                  std::span<const Graph::NodeId> params, bool training = false) {
  const auto& cfg = model.config();
  const Shape in = g.value(input).shape();
  if (in.rank() != 4 || in[1] != cfg.input_height || in[2] != cfg.input_width || in[3] != cfg.input_channels) {
    throw ContractError("forward: operand 'batch' expected Nx" + std::to_string(cfg.input_height) + "x" +
                        std::to_string(cfg.input_width) + "x" + std::to_string(cfg.input_channels) + ", got " +
                        in.str());
  }
  auto p = [&](const std::string& name) { return params[model.index_of(name)]; };
  ForwardNodes out;
  auto norm = [&](Graph::NodeId v, const std::string& name) {
    Graph::NodeId z;
    if (training) {
      out.norm_inputs.emplace_back(name, v);
      z = g.batch_norm(v, kBatchNormEps);
    } else {
      const Tensor& rm = model.param(name + ".running_mean");
      const Tensor& rv = model.param(name + ".running_var");
      std::vector<double> scale(rm.size()), shift(rm.size());
      for (std::size_t c = 0; c < rm.size(); ++c) {
        scale[c] = 1.0 / std::sqrt(rv[c] + kBatchNormEps);
        shift[c] = -rm[c] * scale[c];
      }
      z = g.channel_affine(v, g.constant(Tensor(rm.shape(), std::move(scale))),
                           g.constant(Tensor(rm.shape(), std::move(shift))));
    }
    return g.channel_affine(z, p(name + ".gamma"), p(name + ".beta"));
  };

  Graph::NodeId x = g.conv2d(input, p("stem.kernel"), Graph::kNone, {cfg.stem_stride, Padding::same});
  for (const auto& b : cfg.blocks()) {
    const std::string pre = "block" + std::to_string(b.index);
    const auto h = g.relu(norm(x, pre + ".norm1"));
    const auto shortcut =
        b.projection ? g.conv2d(h, p(pre + ".shortcut.kernel"), Graph::kNone, {b.stride, Padding::same}) : x;
    auto u = g.conv2d(h, p(pre + ".conv1.kernel"), Graph::kNone, {b.stride, Padding::same});
    u = g.relu(norm(u, pre + ".norm2"));
    u = g.conv2d(u, p(pre + ".conv2.kernel"), Graph::kNone, {1, Padding::same});
    if (b.gala) {
      GalaNodes n;
      n.channels = b.out_channels;
      n.use_local = cfg.gala_local;
      const std::string gp = pre + ".gala.";
      n.shrink_weight = p(gp + "shrink_weight");
      n.shrink_bias = p(gp + "shrink_bias");
      n.expand_weight = p(gp + "expand_weight");
      n.expand_bias = p(gp + "expand_bias");
      n.local_shrink_kernel = p(gp + "local_shrink_kernel");
      n.local_shrink_bias = p(gp + "local_shrink_bias");
      n.local_collapse_kernel = p(gp + "local_collapse_kernel");
      n.local_collapse_bias = p(gp + "local_collapse_bias");
      n.additive = p(gp + "additive");
      n.multiplicative = p(gp + "multiplicative");
      const auto f = gala_forward(g, u, n);
      out.activity[b.index] = u;
      out.attention[b.index] = f.attention;
      u = f.modulated;
    }
    x = g.add(shortcut, u);
    out.block_outputs.push_back(x);
  }
  const auto h = g.relu(norm(x, "head.norm"));
  const auto pooled = g.global_avg_pool(h);
  const auto logits = g.dense(pooled, p("head.dense.weight"), p("head.dense.bias"));
  out.logits = g.reshape(logits, Shape{in[0], cfg.num_classes});
  return out;
}

struct ForwardResult {
  Tensor logits;  // N x K
  std::map<std::size_t, Tensor> attention;
};

/// Inference: logits and every GALA volume A^l, l in gala_layers.
inline ForwardResult forward_with_attention(const Model& model, const Tensor& batch) {
  Graph g;
  const auto ids = attach(g, model, false);
  const auto f = build_forward(g, model, g.constant(batch), ids);
  ForwardResult r;
  r.logits = g.value(f.logits);
  for (const auto& [layer, node] : f.attention) r.attention[layer] = g.value(node);
  return r;
}

}  // namespace gala
