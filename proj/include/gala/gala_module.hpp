#pragma once

// Global-and-local attention (GALA).
//
//   p = global_avg_pool(U)                         per-channel summary, 1x1xC
//   g = W_expand relu(W_shrink p)                  global feature attention
//   S = V_collapse * relu(V_shrink * U)            local saliency, HxWx1 (1x1 convs)
//   A = tanh(a_c (G* + S*) + m_c (G* . S*))        G*, S* tiled to HxWxC
//   U' = U . A
//
// Every stage exists twice: as Graph builders (differentiable, used for
// training) and as value-level functions that build a throwaway graph.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gala/autodiff.hpp"
#include "gala/errors.hpp"
#include "gala/rng.hpp"
#include "gala/tensor.hpp"

namespace gala {

struct GalaParams {
  std::size_t channels = 0;
  std::size_t reduction = 4;
  /// false: S is held at zero and A = tanh(a_c g_c), a squeeze-excite style gate.
  bool use_local = true;

  Tensor shrink_weight;          // C x C/r
  Tensor shrink_bias;            // C/r
  Tensor expand_weight;          // C/r x C
  Tensor expand_bias;            // C
  Tensor local_shrink_kernel;    // 1 x 1 x C x C/r
  Tensor local_shrink_bias;      // C/r
  Tensor local_collapse_kernel;  // 1 x 1 x C/r x 1
  Tensor local_collapse_bias;    // 1
  Tensor additive;               // a, length C
  Tensor multiplicative;         // m, length C

  std::size_t hidden() const { return channels / reduction; }

  /// Fan-in scaled normal weights, zero biases, a = 1, m = 0.
  static GalaParams init(std::size_t channels, std::size_t reduction, Rng& rng, bool use_local = true) {
    check_reduction(channels, reduction);
    GalaParams p;
    p.channels = channels;
    p.reduction = reduction;
    p.use_local = use_local;
    const std::size_t h = channels / reduction;
    auto normal = [&rng](Shape s, double stddev) {
      std::vector<double> v(s.numel());
      for (double& x : v) x = rng.normal(0.0, stddev);
      return Tensor(s, std::move(v));
    };
    const double c = static_cast<double>(channels), hd = static_cast<double>(h);
    p.shrink_weight = normal({channels, h}, std::sqrt(2.0 / c));
    p.shrink_bias = Tensor::zeros({h});
    p.expand_weight = normal({h, channels}, std::sqrt(1.0 / hd));
    p.expand_bias = Tensor::zeros({channels});
    p.local_shrink_kernel = normal({1, 1, channels, h}, std::sqrt(2.0 / c));
    p.local_shrink_bias = Tensor::zeros({h});
    p.local_collapse_kernel = normal({1, 1, h, 1}, std::sqrt(1.0 / hd));
    p.local_collapse_bias = Tensor::zeros({1});
    p.additive = Tensor::full({channels}, 1.0);
    p.multiplicative = Tensor::zeros({channels});
    return p;
  }

  static void check_reduction(std::size_t channels, std::size_t reduction) {
    if (reduction == 0 || channels == 0 || channels % reduction != 0) {
      throw ContractError("GALA: reduction ratio " + std::to_string(reduction) + " does not divide " +
                          std::to_string(channels) + " channels");
    }
  }

  void validate() const {
    check_reduction(channels, reduction);
    const std::size_t C = channels, h = hidden();
    auto need = [](const Tensor& t, const Shape& s, const char* name) {
      if (!(t.shape() == s)) {
        throw ContractError(std::string("GALA: field '") + name + "' expected " + s.str() + ", got " +
                            t.shape().str());
      }
      if (!t.all_finite()) throw ContractError(std::string("GALA: field '") + name + "' is not finite");
    };
    need(shrink_weight, {C, h}, "shrink_weight");
    need(shrink_bias, {h}, "shrink_bias");
    need(expand_weight, {h, C}, "expand_weight");
    need(expand_bias, {C}, "expand_bias");
    if (local_shrink_kernel.shape().rank() == 4 &&
        (local_shrink_kernel.shape()[0] != 1 || local_shrink_kernel.shape()[1] != 1)) {
      throw ContractError("GALA: local_shrink_kernel must be 1x1, got " + local_shrink_kernel.shape().str());
    }
    if (local_collapse_kernel.shape().rank() == 4 &&
        (local_collapse_kernel.shape()[0] != 1 || local_collapse_kernel.shape()[1] != 1)) {
      throw ContractError("GALA: local_collapse_kernel must be 1x1, got " + local_collapse_kernel.shape().str());
    }
    need(local_shrink_kernel, {1, 1, C, h}, "local_shrink_kernel");
    need(local_shrink_bias, {h}, "local_shrink_bias");
    need(local_collapse_kernel, {1, 1, h, 1}, "local_collapse_kernel");
    need(local_collapse_bias, {1}, "local_collapse_bias");
    need(additive, {C}, "additive");
    need(multiplicative, {C}, "multiplicative");
  }

  /// Visits every learnable field by name, in checkpoint order.
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn&& fn) {
    fn("shrink_weight", self.shrink_weight);
    fn("shrink_bias", self.shrink_bias);
    fn("expand_weight", self.expand_weight);
    fn("expand_bias", self.expand_bias);
    fn("local_shrink_kernel", self.local_shrink_kernel);
    fn("local_shrink_bias", self.local_shrink_bias);
    fn("local_collapse_kernel", self.local_collapse_kernel);
    fn("local_collapse_bias", self.local_collapse_bias);
    fn("additive", self.additive);
    fn("multiplicative", self.multiplicative);
  }
};

/// Output of one GALA module for one layer, values in [-1, 1].
struct AttentionVolume {
  std::size_t layer = 0;
  Tensor values;  // N x H x W x C
};

/// GalaParams fields registered as graph leaves.
struct GalaNodes {
  using NodeId = Graph::NodeId;
  std::size_t channels = 0;
  bool use_local = true;
  NodeId shrink_weight = Graph::kNone, shrink_bias = Graph::kNone;
  NodeId expand_weight = Graph::kNone, expand_bias = Graph::kNone;
  NodeId local_shrink_kernel = Graph::kNone, local_shrink_bias = Graph::kNone;
  NodeId local_collapse_kernel = Graph::kNone, local_collapse_bias = Graph::kNone;
  NodeId additive = Graph::kNone, multiplicative = Graph::kNone;
};

inline GalaNodes attach(Graph& g, const GalaParams& p, bool trainable) {
  p.validate();
  auto put = [&](const Tensor& t) { return trainable ? g.parameter(t) : g.constant(t); };
  GalaNodes n;
  n.channels = p.channels;
  n.use_local = p.use_local;
  n.shrink_weight = put(p.shrink_weight);
  n.shrink_bias = put(p.shrink_bias);
  n.expand_weight = put(p.expand_weight);
  n.expand_bias = put(p.expand_bias);
  n.local_shrink_kernel = put(p.local_shrink_kernel);
  n.local_shrink_bias = put(p.local_shrink_bias);
  n.local_collapse_kernel = put(p.local_collapse_kernel);
  n.local_collapse_bias = put(p.local_collapse_bias);
  n.additive = put(p.additive);
  n.multiplicative = put(p.multiplicative);
  return n;
}

namespace detail {
inline void expect_activity(const Graph& g, Graph::NodeId u, const GalaNodes& n, const char* op) {
  const Shape& s = g.value(u).shape();
  if (s.rank() != 4 || s[3] != n.channels) {
    throw ContractError(std::string(op) + ": operand 'U' expected NxHxWx" + std::to_string(n.channels) + ", got " +
                        s.str());
  }
}
}  // namespace detail

/// g, shape N x 1 x 1 x C.
inline Graph::NodeId global_attention(Graph& g, Graph::NodeId u, const GalaNodes& n) {
  detail::expect_activity(g, u, n, "global_attention");
  const auto pooled = g.global_avg_pool(u);
  const auto hidden = g.relu(g.dense(pooled, n.shrink_weight, n.shrink_bias));
  return g.dense(hidden, n.expand_weight, n.expand_bias);
}

/// S, shape N x H x W x 1.
inline Graph::NodeId local_saliency(Graph& g, Graph::NodeId u, const GalaNodes& n) {
  detail::expect_activity(g, u, n, "local_saliency");
  const auto hidden = g.relu(g.conv2d(u, n.local_shrink_kernel, n.local_shrink_bias));
  return g.conv2d(hidden, n.local_collapse_kernel, n.local_collapse_bias);
}

/// A = tanh(a (G* + S*) + m (G* . S*)), shape `target` (N x H x W x C).
inline Graph::NodeId integrate_attention(Graph& g, Graph::NodeId global, Graph::NodeId local, const GalaNodes& n,
                                         const Shape& target) {
  if (target.rank() != 4 || target[3] != n.channels) {
    throw ContractError("integrate_attention: target " + target.str() + " does not have " +
                        std::to_string(n.channels) + " channels");
  }
  if (g.value(n.additive).size() != n.channels || g.value(n.multiplicative).size() != n.channels) {
    throw ContractError("integrate_attention: gain vectors must have length " + std::to_string(n.channels));
  }
  const auto gt = g.tile(global, target);
  const auto st = g.tile(local, target);
  const auto at = g.tile(n.additive, target);
  const auto mt = g.tile(n.multiplicative, target);
  const auto additive = g.mul(at, g.add(gt, st));
  const auto multiplicative = g.mul(mt, g.mul(gt, st));
  return g.tanh(g.add(additive, multiplicative));
}

inline Graph::NodeId apply_attention(Graph& g, Graph::NodeId u, Graph::NodeId a) { return g.mul(u, a); }

/// Per-site L2 norm over channels, N x H x W x 1.
inline Graph::NodeId collapse_attention(Graph& g, Graph::NodeId a) { return g.channel_l2(a); }

struct GalaForward {
  Graph::NodeId global, local, attention, modulated;
};

inline GalaForward gala_forward(Graph& g, Graph::NodeId u, const GalaNodes& n) {
  const Shape shape = g.value(u).shape();
  GalaForward f;
  f.global = global_attention(g, u, n);
  if (n.use_local) {
    f.local = local_saliency(g, u, n);
  } else {
    f.local = g.constant(Tensor::zeros({shape[0], shape[1], shape[2], 1}));
  }
  f.attention = integrate_attention(g, f.global, f.local, n, shape);
  f.modulated = apply_attention(g, u, f.attention);
  return f;
}

// ---------------------------------------------------------------------------
// Value-level API. Activities may be H x W x C or N x H x W x C.

namespace detail {
inline Tensor as_batch(const Tensor& t) {
  if (t.shape().rank() == 3) return t.reshaped({1, t.shape()[0], t.shape()[1], t.shape()[2]});
  if (t.shape().rank() != 4) throw ContractError("expected HxWxC or NxHxWxC, got " + t.shape().str());
  return t;
}
}  // namespace detail

inline Tensor global_attention(const Tensor& u, const GalaParams& p) {
  Graph g;
  const auto n = attach(g, p, false);
  return g.value(global_attention(g, g.constant(detail::as_batch(u)), n));
}

inline Tensor local_saliency(const Tensor& u, const GalaParams& p) {
  Graph g;
  const auto n = attach(g, p, false);
  return g.value(local_saliency(g, g.constant(detail::as_batch(u)), n));
}

/// `global` N x 1 x 1 x C (or C), `local` N x H x W x 1, gains length C.
inline Tensor integrate_attention(const Tensor& global, const Tensor& local, const Tensor& additive,
                                  const Tensor& multiplicative) {
  const std::size_t C = global.shape().back();
  if (additive.size() != C || multiplicative.size() != C) {
    throw ContractError("integrate_attention: gain vectors must have length " + std::to_string(C));
  }
  const Tensor s = detail::as_batch(local);
  Graph g;
  GalaNodes n;
  n.channels = C;
  n.additive = g.constant(additive.reshaped({C}));
  n.multiplicative = g.constant(multiplicative.reshaped({C}));
  const Shape target{s.shape()[0], s.shape()[1], s.shape()[2], C};
  return g.value(integrate_attention(g, g.constant(global), g.constant(s), n, target));
}

inline Tensor apply_attention(const Tensor& u, const Tensor& a) {
  if (!(u.shape() == a.shape())) {
    throw ContractError("apply_attention: operand 'A' expected " + u.shape().str() + ", got " + a.shape().str());
  }
  Graph g;
  return g.value(apply_attention(g, g.constant(u), g.constant(a)));
}

inline Tensor collapse_attention(const Tensor& a) {
  Graph g;
  return g.value(collapse_attention(g, g.constant(detail::as_batch(a))));
}

/// Full module on a value: returns A (same shape as the batched activity).
inline Tensor gala_attention(const Tensor& u, const GalaParams& p) {
  Graph g;
  const auto n = attach(g, p, false);
  return g.value(gala_forward(g, g.constant(detail::as_batch(u)), n).attention);
}

}  // namespace gala
