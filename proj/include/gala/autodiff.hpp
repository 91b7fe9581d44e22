#pragma once

// Tape-based reverse-mode differentiation over gala::Tensor.
//
// A Graph records primitive applications in evaluation order. Values are
// computed eagerly when a node is added; backward() walks the tape in reverse
// and returns fresh gradient buffers, so it may be called any number of times
// on the same recording and always yields identical results.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gala/errors.hpp"
#include "gala/tensor.hpp"

namespace gala {

enum class OpKind {
  leaf,
  conv2d,
  dense,
  relu,
  tanh,
  global_avg_pool,
  add,
  mul,
  tile,
  channel_l2,
  softmax_cross_entropy,
  l2_distance,
  channel_affine,
  scale,
  unit_normalize,
  batch_norm,
  weighted_mean,
  sum,
  reshape,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::conv2d: return "conv2d";
    case OpKind::dense: return "dense";
    case OpKind::relu: return "relu";
    case OpKind::tanh: return "tanh";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::tile: return "tile";
    case OpKind::channel_l2: return "channel_l2";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    case OpKind::l2_distance: return "l2_distance";
    case OpKind::channel_affine: return "channel_affine";
    case OpKind::scale: return "scale";
    case OpKind::unit_normalize: return "unit_normalize";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::weighted_mean: return "weighted_mean";
    case OpKind::sum: return "sum";
    case OpKind::reshape: return "reshape";
  }
  return "?";
}

enum class Padding { same, valid };

struct Conv2dAttrs {
  std::size_t stride = 1;
  Padding padding = Padding::same;
};

class Graph;

class Gradients {
 public:
  /// Gradient of the loss w.r.t. a node. Throws for nodes outside the
  /// differentiated subgraph (constants, detached leaves).
  Tensor of(std::size_t node) const;
  bool has(std::size_t node) const { return node < grads_.size() && !grads_[node].empty(); }

 private:
  friend class Graph;
  const Graph* graph_ = nullptr;
  std::vector<std::vector<double>> grads_;
};

class Graph {
 public:
  using NodeId = std::size_t;
  static constexpr NodeId kNone = std::numeric_limits<NodeId>::max();

  /// Leaf; differentiable iff t.requires_grad().
  NodeId leaf(Tensor t) {
    Node n;
    n.op = OpKind::leaf;
    n.needs_grad = t.requires_grad();
    n.value = std::move(t);
    return push(std::move(n));
  }
  NodeId parameter(const Tensor& t) { return leaf(t.with_requires_grad(true)); }
  NodeId constant(const Tensor& t) { return leaf(t.with_requires_grad(false)); }

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(NodeId id) const { return node(id).value; }
  OpKind kind(NodeId id) const { return node(id).op; }
  bool requires_grad(NodeId id) const { return node(id).needs_grad; }

  // Kernel layout KH x KW x Cin x Cout; input N x H x W x Cin.
  NodeId conv2d(NodeId x, NodeId kernel, NodeId bias, Conv2dAttrs attrs = {});
  // Weight Cin x Cout applied along the last axis; leading axes are rows.
  NodeId dense(NodeId x, NodeId weight, NodeId bias);
  NodeId relu(NodeId x);
  NodeId tanh(NodeId x);
  NodeId global_avg_pool(NodeId x);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  /// Broadcast size-1 axes (after left-padding rank) up to `target`.
  NodeId tile(NodeId x, Shape target);
  /// Per-site Euclidean norm over channels: N x H x W x C -> N x H x W x 1.
  NodeId channel_l2(NodeId x);
  /// Mean over the batch of -log softmax(logits)[label]; logits N x K.
  NodeId softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels);
  /// Per-sample Euclidean distance over all non-batch axes -> shape {N}.
  NodeId l2_distance(NodeId a, NodeId b);
  /// y = x * gamma[c] + beta[c] along the last axis.
  NodeId channel_affine(NodeId x, NodeId gamma, NodeId beta);
  NodeId scale(NodeId x, double factor);
  /// Per-sample x / max(||x||, eps).
  NodeId unit_normalize(NodeId x, double eps = 1e-12);
  /// Per-channel (x - mean) / sqrt(var + eps), statistics over every axis but
  /// the last (batch statistics, biased variance).
  NodeId batch_norm(NodeId x, double eps = 1e-5);
  /// sum_n w_n x_n / sum_n w_n for x of shape {N}; 0 when all weights vanish.
  NodeId weighted_mean(NodeId x, std::vector<double> weights);
  NodeId sum(NodeId x);
  /// Same values, new shape of equal element count.
  NodeId reshape(NodeId x, Shape shape);

  Gradients backward(NodeId loss) const;

 private:
  struct Node {
    OpKind op = OpKind::leaf;
    std::array<NodeId, 3> in{kNone, kNone, kNone};
    Tensor value;
    bool needs_grad = false;
    Conv2dAttrs conv;
    std::size_t pad_top = 0, pad_left = 0;
    double scalar = 0.0;
    std::vector<double> saved;
    std::vector<std::size_t> labels;
  };

  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) throw ContractError("Graph: unknown node id " + std::to_string(id));
    return nodes_[id];
  }

  NodeId push(Node n) {
    if (n.op != OpKind::leaf && !n.value.all_finite()) {
      throw NumericError(std::string("non-finite output from ") + op_name(n.op));
    }
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  bool any_grad(std::initializer_list<NodeId> ids) const {
    for (NodeId id : ids)
      if (id != kNone && node(id).needs_grad) return true;
    return false;
  }

  static void expect(bool ok, const char* op, const char* operand, const std::string& expected,
                     const Shape& got) {
    if (!ok) {
      throw ContractError(std::string(op) + ": operand '" + operand + "' expected " + expected + ", got " +
                          got.str());
    }
  }

  void backward_node(const Node& n, const std::vector<double>& g, std::vector<std::vector<double>>& grads) const;

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------

inline Tensor Gradients::of(std::size_t id) const {
  if (!graph_ || id >= graph_->size()) throw ContractError("Gradients::of: unknown node");
  if (!graph_->requires_grad(id)) {
    throw ContractError("Gradients::of: node " + std::to_string(id) + " is detached (no gradient recorded)");
  }
  const Shape shape = graph_->value(id).shape();
  if (grads_[id].empty()) return Tensor::zeros(shape);
  return Tensor(shape, grads_[id]);
}

inline Graph::NodeId Graph::conv2d(NodeId x, NodeId kernel, NodeId bias, Conv2dAttrs attrs) {
  const Tensor& xv = value(x);
  const Tensor& kv = value(kernel);
  expect(xv.shape().rank() == 4, "conv2d", "input", "rank-4 NxHxWxC", xv.shape());
  expect(kv.shape().rank() == 4 && kv.shape()[2] == xv.shape()[3], "conv2d", "kernel",
         "KHxKWx" + std::to_string(xv.shape()[3]) + "xCout", kv.shape());
  if (attrs.stride == 0) throw ContractError("conv2d: stride must be positive");
  const std::size_t N = xv.shape()[0], H = xv.shape()[1], W = xv.shape()[2], Ci = xv.shape()[3];
  const std::size_t KH = kv.shape()[0], KW = kv.shape()[1], Co = kv.shape()[3];
  if (bias != kNone) {
    expect(value(bias).shape() == Shape{Co}, "conv2d", "bias", "[" + std::to_string(Co) + "]", value(bias).shape());
  }
  const std::size_t s = attrs.stride;
  std::size_t OH = 0, OW = 0, pt = 0, pl = 0;
  if (attrs.padding == Padding::same) {
    OH = (H + s - 1) / s;
    OW = (W + s - 1) / s;
    const std::size_t need_h = (OH - 1) * s + KH, need_w = (OW - 1) * s + KW;
    pt = need_h > H ? (need_h - H) / 2 : 0;
    pl = need_w > W ? (need_w - W) / 2 : 0;
  } else {
    expect(H >= KH && W >= KW, "conv2d", "input", "spatial size >= kernel for valid padding", xv.shape());
    OH = (H - KH) / s + 1;
    OW = (W - KW) / s + 1;
  }

  std::vector<double> out(N * OH * OW * Co, 0.0);
  const double* xp = xv.values().data();
  const double* wp = kv.values().data();
  const double* bp = bias != kNone ? value(bias).values().data() : nullptr;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t oh = 0; oh < OH; ++oh) {
      for (std::size_t ow = 0; ow < OW; ++ow) {
        double* o = &out[((n * OH + oh) * OW + ow) * Co];
        if (bp) std::copy(bp, bp + Co, o);
        for (std::size_t kh = 0; kh < KH; ++kh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s + kh) - static_cast<std::ptrdiff_t>(pt);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
          for (std::size_t kw = 0; kw < KW; ++kw) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * s + kw) - static_cast<std::ptrdiff_t>(pl);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
            const double* xrow = xp + ((n * H + ih) * W + iw) * Ci;
            const double* wk = wp + (kh * KW + kw) * Ci * Co;
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const double xval = xrow[ci];
              const double* wr = wk + ci * Co;
              for (std::size_t co = 0; co < Co; ++co) o[co] += xval * wr[co];
            }
          }
        }
      }
    }
  }
  Node nd;
  nd.op = OpKind::conv2d;
  nd.in = {x, kernel, bias};
  nd.value = Tensor(Shape{N, OH, OW, Co}, std::move(out));
  nd.needs_grad = any_grad({x, kernel, bias});
  nd.conv = attrs;
  nd.pad_top = pt;
  nd.pad_left = pl;
  return push(std::move(nd));
}

inline Graph::NodeId Graph::dense(NodeId x, NodeId weight, NodeId bias) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(weight);
  expect(xv.shape().rank() >= 1, "dense", "input", "rank >= 1", xv.shape());
  const std::size_t Ci = xv.shape().back();
  expect(wv.shape().rank() == 2 && wv.shape()[0] == Ci, "dense", "weight", std::to_string(Ci) + "xCout", wv.shape());
  const std::size_t Co = wv.shape()[1];
  if (bias != kNone) {
    expect(value(bias).shape() == Shape{Co}, "dense", "bias", "[" + std::to_string(Co) + "]", value(bias).shape());
  }
  const std::size_t M = xv.size() / Ci;
  std::vector<double> out(M * Co, 0.0);
  const double* xp = xv.values().data();
  const double* wp = wv.values().data();
  for (std::size_t m = 0; m < M; ++m) {
    double* o = &out[m * Co];
    if (bias != kNone) std::copy(value(bias).values().begin(), value(bias).values().end(), o);
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      const double xval = xp[m * Ci + ci];
      const double* wr = wp + ci * Co;
      for (std::size_t co = 0; co < Co; ++co) o[co] += xval * wr[co];
    }
  }
  std::array<std::size_t, 4> dims{};
  const auto xd = xv.shape().dims();
  std::copy(xd.begin(), xd.end(), dims.begin());
  dims[xd.size() - 1] = Co;
  Node nd;
  nd.op = OpKind::dense;
  nd.in = {x, weight, bias};
  nd.value = Tensor(Shape(std::span<const std::size_t>(dims.data(), xd.size())), std::move(out));
  nd.needs_grad = any_grad({x, weight, bias});
  return push(std::move(nd));
}

inline Graph::NodeId Graph::relu(NodeId x) {
  const Tensor& xv = value(x);
  std::vector<double> out(xv.size());
  std::transform(xv.values().begin(), xv.values().end(), out.begin(), [](double v) { return v > 0.0 ? v : 0.0; });
  Node nd;
  nd.op = OpKind::relu;
  nd.in = {x};
  nd.value = Tensor(xv.shape(), std::move(out));
  nd.needs_grad = any_grad({x});
  return push(std::move(nd));
}

inline Graph::NodeId Graph::tanh(NodeId x) {
  const Tensor& xv = value(x);
  std::vector<double> out(xv.size());
  std::transform(xv.values().begin(), xv.values().end(), out.begin(), [](double v) { return std::tanh(v); });
  Node nd;
  nd.op = OpKind::tanh;
  nd.in = {x};
  nd.value = Tensor(xv.shape(), std::move(out));
  nd.needs_grad = any_grad({x});
  return push(std::move(nd));
}

inline Graph::NodeId Graph::global_avg_pool(NodeId x) {
  const Tensor& xv = value(x);
  expect(xv.shape().rank() == 4, "global_avg_pool", "input", "rank-4 NxHxWxC", xv.shape());
  const std::size_t N = xv.shape()[0], HW = xv.shape()[1] * xv.shape()[2], C = xv.shape()[3];
  std::vector<double> out(N * C, 0.0);
  const double* xp = xv.values().data();
  for (std::size_t n = 0; n < N; ++n) {
    double* o = &out[n * C];
    for (std::size_t p = 0; p < HW; ++p) {
      const double* row = xp + (n * HW + p) * C;
      for (std::size_t c = 0; c < C; ++c) o[c] += row[c];
    }
    for (std::size_t c = 0; c < C; ++c) o[c] /= static_cast<double>(HW);
  }
  Node nd;
  nd.op = OpKind::global_avg_pool;
  nd.in = {x};
  nd.value = Tensor(Shape{N, 1, 1, C}, std::move(out));
  nd.needs_grad = any_grad({x});
  return push(std::move(nd));
}

inline Graph::NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  expect(av.shape() == bv.shape(), "add", "rhs", av.shape().str(), bv.shape());
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Node nd;
  nd.op = OpKind::add;
  nd.in = {a, b};
  nd.value = Tensor(av.shape(), std::move(out));
  nd.needs_grad = any_grad({a, b});
  return push(std::move(nd));
}

inline Graph::NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  expect(av.shape() == bv.shape(), "mul", "rhs", av.shape().str(), bv.shape());
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Node nd;
  nd.op = OpKind::mul;
  nd.in = {a, b};
  nd.value = Tensor(av.shape(), std::move(out));
  nd.needs_grad = any_grad({a, b});
  return push(std::move(nd));
}

namespace detail {

// Source offset for each element of `target` when broadcasting `src`.
inline std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& target) {
  const Shape s4 = src.padded4(), t4 = target.padded4();
  std::array<std::size_t, 4> stride{};
  std::size_t acc = 1;
  for (std::size_t i = 4; i-- > 0;) {
    stride[i] = s4[i] == 1 ? 0 : acc;
    acc *= s4[i];
  }
  std::vector<std::size_t> idx(target.numel());
  std::size_t k = 0;
  for (std::size_t a = 0; a < t4[0]; ++a)
    for (std::size_t b = 0; b < t4[1]; ++b)
      for (std::size_t c = 0; c < t4[2]; ++c)
        for (std::size_t d = 0; d < t4[3]; ++d)
          idx[k++] = a * stride[0] + b * stride[1] + c * stride[2] + d * stride[3];
  return idx;
}

}  // namespace detail

inline Graph::NodeId Graph::tile(NodeId x, Shape target) {
  const Tensor& xv = value(x);
  expect(xv.shape().rank() <= target.rank(), "tile", "input", "rank <= " + std::to_string(target.rank()), xv.shape());
  const Shape s4 = xv.shape().padded4(), t4 = target.padded4();
  for (std::size_t i = 0; i < 4; ++i) {
    expect(s4[i] == 1 || s4[i] == t4[i], "tile", "input", "axes of size 1 or matching " + target.str(), xv.shape());
  }
  const auto idx = detail::broadcast_index(xv.shape(), target);
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = xv[idx[i]];
  Node nd;
  nd.op = OpKind::tile;
  nd.in = {x};
  nd.value = Tensor(target, std::move(out));
  nd.needs_grad = any_grad({x});
  return push(std::move(nd));
}

inline Graph::NodeId Graph::channel_l2(NodeId x) {
  const Tensor& xv = value(x);
  expect(xv.shape().rank() == 4, "channel_l2", "input", "rank-4 NxHxWxC", xv.shape());
  const std::size_t C = xv.shape()[3], sites = xv.size() / C;
  std::vector<double> out(sites);
  for (std::size_t p = 0; p < sites; ++p) {
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c) acc += xv[p * C + c] * xv[p * C + c];
    out[p] = std::sqrt(acc);
  }
  Node nd;
  nd.op = OpKind::channel_l2;
  nd.in = {x};
  nd.value = Tensor(Shape{xv.shape()[0], xv.shape()[1], xv.shape()[2], 1}, std::move(out));
  nd.needs_grad = any_grad({x});
  return push(std::move(nd));
}

inline Graph::NodeId Graph::softmax_cross_entropy(NodeId logits, std::vector<std::size_t> labels) {
  const Tensor& lv = value(logits);
  expect(lv.shape().rank() == 2, "softmax_cross_entropy", "logits", "rank-2 NxK", lv.shape());
  const std::size_t N = lv.shape()[0], K = lv.shape()[1];
  if (labels.size() != N) {
    throw ContractError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                        std::to_string(N));
  }
  std::vector<double> probs(N * K);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] >= K) {
      throw ContractError("softmax_cross_entropy: label " + std::to_string(labels[n]) + " out of range [0," +
                          std::to_string(K) + ")");
    }
    const double* row = lv.values().data() + n * K;
    const double mx = *std::max_element(row, row + K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] = std::exp(row[k] - mx) / z;
    total += mx + std::log(z) - row[labels[n]];
  }
  Node nd;
  nd.op = OpKind::softmax_cross_entropy;
  nd.in = {logits};
  nd.value = Tensor::scalar(total / static_cast<double>(N));
  nd.needs_grad = any_grad({logits});
  nd.saved = std::move(probs);
  nd.labels = std::move(labels);
  return push(std::move(nd));
}

inline Graph::NodeId Graph::l2_distance(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  expect(av.shape().rank() >= 1, "l2_distance", "lhs", "rank >= 1", av.shape());
  expect(av.shape() == bv.shape(), "l2_distance", "rhs", av.shape().str(), bv.shape());
  const std::size_t N = av.shape()[0], per = av.size() / N;
  std::vector<double> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    double acc = 0.0;
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) acc += (av[i] - bv[i]) * (av[i] - bv[i]);
    out[n] = std::sqrt(acc);
  }
  Node nd;
  nd.op = OpKind::l2_distance;
  nd.in = {a, b};
  nd.value = Tensor(Shape{N}, std::move(out));
  nd.needs_grad = any_grad({a, b});
  return push(std::move(nd));
}

inline Graph::NodeId Graph::channel_affine(NodeId x, NodeId gamma, NodeId beta) {
  const Tensor& xv = value(x);
  const std::size_t C = xv.shape().back();
  expect(value(gamma).shape() == Shape{C}, "channel_affine", "gamma", "[" + std::to_string(C) + "]",
         value(gamma).shape());
  expect(value(beta).shape() == Shape{C}, "channel_affine", "beta", "[" + std::to_string(C) + "]",
         value(beta).shape());
  const double* gp = value(gamma).values().data();
  const double* bp = value(beta).values().data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); i += C)
    for (std::size_t c = 0; c < C; ++c) out[i + c] = xv[i + c] * gp[c] + bp[c];
  Node nd;
  nd.op = OpKind::channel_affine;
  nd.in = {x, gamma, beta};
  nd.value = Tensor(xv.shape(), std::move(out));
  nd.needs_grad = any_grad({x, gamma, beta});
  return push(std::move(nd));
}

inline Graph::NodeId Graph::scale(NodeId x, double factor) {
  const Tensor& xv = value(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  Node nd;
  nd.op = OpKind::scale;
  nd.in = {x};
  nd.value = Tensor(xv.shape(), std::move(out));
  nd.needs_grad = any_grad({x});
  nd.scalar = factor;
  return push(std::move(nd));
}

inline Graph::NodeId Graph::unit_normalize(NodeId x, double eps) {
  const Tensor& xv = value(x);
  expect(xv.shape().rank() >= 1, "unit_normalize", "input", "rank >= 1", xv.shape());
  const std::size_t N = xv.shape()[0], per = xv.size() / N;
  std::vector<double> out(xv.size()), norms(N);
  for (std::size_t n = 0; n < N; ++n) {
    double acc = 0.0;
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) acc += xv[i] * xv[i];
    norms[n] = std::max(std::sqrt(acc), eps);
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) out[i] = xv[i] / norms[n];
  }
  Node nd;
  nd.op = OpKind::unit_normalize;
  nd.in = {x};
  nd.value = Tensor(xv.shape(), std::move(out));
  nd.needs_grad = any_grad({x});
  nd.scalar = eps;
  nd.saved = std::move(norms);
  return push(std::move(nd));
}

inline Graph::NodeId Graph::batch_norm(NodeId x, double eps) {
  const Tensor& xv = value(x);
  expect(xv.shape().rank() >= 2, "batch_norm", "input", "rank >= 2", xv.shape());
  const std::size_t C = xv.shape().back(), M = xv.size() / C;
  std::vector<double> mean(C, 0.0), var(C, 0.0), inv_std(C);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t c = 0; c < C; ++c) mean[c] += xv[i * C + c];
  for (double& m : mean) m /= static_cast<double>(M);
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const double d = xv[i * C + c] - mean[c];
      var[c] += d * d;
    }
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] / static_cast<double>(M) + eps);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t c = 0; c < C; ++c) out[i * C + c] = (xv[i * C + c] - mean[c]) * inv_std[c];
  Node nd;
  nd.op = OpKind::batch_norm;
  nd.in = {x};
  nd.value = Tensor(xv.shape(), std::move(out));
  nd.needs_grad = any_grad({x});
  nd.scalar = eps;
  nd.saved = std::move(inv_std);
  return push(std::move(nd));
}

inline Graph::NodeId Graph::weighted_mean(NodeId x, std::vector<double> weights) {
  const Tensor& xv = value(x);
  expect(xv.shape().rank() == 1 && xv.size() == weights.size(), "weighted_mean", "input",
         "[" + std::to_string(weights.size()) + "]", xv.shape());
  double wsum = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] < 0.0) throw ContractError("weighted_mean: negative weight");
    wsum += weights[i];
    acc += weights[i] * xv[i];
  }
  Node nd;
  nd.op = OpKind::weighted_mean;
  nd.in = {x};
  nd.value = Tensor::scalar(wsum > 0.0 ? acc / wsum : 0.0);
  nd.needs_grad = any_grad({x});
  nd.scalar = wsum;
  nd.saved = std::move(weights);
  return push(std::move(nd));
}

inline Graph::NodeId Graph::sum(NodeId x) {
  const Tensor& xv = value(x);
  double acc = 0.0;
  for (double v : xv.values()) acc += v;
  Node nd;
  nd.op = OpKind::sum;
  nd.in = {x};
  nd.value = Tensor::scalar(acc);
  nd.needs_grad = any_grad({x});
  return push(std::move(nd));
}

inline Graph::NodeId Graph::reshape(NodeId x, Shape shape) {
  const Tensor& xv = value(x);
  expect(shape.numel() == xv.size(), "reshape", "input", std::to_string(shape.numel()) + " elements", xv.shape());
  Node nd;
  nd.op = OpKind::reshape;
  nd.in = {x};
  nd.value = xv.reshaped(shape).with_requires_grad(false);
  nd.needs_grad = any_grad({x});
  return push(std::move(nd));
}

// ---------------------------------------------------------------------------

inline Gradients Graph::backward(NodeId loss) const {
  const Node& ln = node(loss);
  if (ln.value.size() != 1) {
    throw ContractError("backward: loss node must be scalar, got shape " + ln.value.shape().str());
  }
  Gradients out;
  out.graph_ = this;
  out.grads_.resize(nodes_.size());
  if (!ln.needs_grad) return out;
  out.grads_[loss].assign(1, 1.0);
  for (NodeId id = loss + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.needs_grad || n.op == OpKind::leaf || out.grads_[id].empty()) continue;
    backward_node(n, out.grads_[id], out.grads_);
  }
  return out;
}

inline void Graph::backward_node(const Node& n, const std::vector<double>& g,
                                 std::vector<std::vector<double>>& grads) const {
  auto slot = [&](NodeId id) -> double* {
    if (id == kNone || !nodes_[id].needs_grad) return nullptr;
    auto& buf = grads[id];
    if (buf.empty()) buf.assign(nodes_[id].value.size(), 0.0);
    return buf.data();
  };

  switch (n.op) {
    case OpKind::leaf:
      break;
    case OpKind::conv2d: {
      const Tensor& xv = nodes_[n.in[0]].value;
      const Tensor& kv = nodes_[n.in[1]].value;
      double* dx = slot(n.in[0]);
      double* dk = slot(n.in[1]);
      double* db = slot(n.in[2]);
      const std::size_t N = xv.shape()[0], H = xv.shape()[1], W = xv.shape()[2], Ci = xv.shape()[3];
      const std::size_t KH = kv.shape()[0], KW = kv.shape()[1], Co = kv.shape()[3];
      const std::size_t OH = n.value.shape()[1], OW = n.value.shape()[2], s = n.conv.stride;
      const double* xp = xv.values().data();
      // Kernel transposed to KH x KW x Cout x Cin so the input-gradient
      // update is a contiguous axpy over Cin.
      std::vector<double> wt;
      if (dx) {
        wt.resize(kv.size());
        const double* wp = kv.values().data();
        for (std::size_t k = 0; k < KH * KW; ++k)
          for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t co = 0; co < Co; ++co) wt[(k * Co + co) * Ci + ci] = wp[(k * Ci + ci) * Co + co];
      }
      for (std::size_t b = 0; b < N; ++b) {
        for (std::size_t oh = 0; oh < OH; ++oh) {
          for (std::size_t ow = 0; ow < OW; ++ow) {
            const double* go = &g[((b * OH + oh) * OW + ow) * Co];
            if (db)
              for (std::size_t co = 0; co < Co; ++co) db[co] += go[co];
            for (std::size_t kh = 0; kh < KH; ++kh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s + kh) - static_cast<std::ptrdiff_t>(n.pad_top);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t kw = 0; kw < KW; ++kw) {
                const std::ptrdiff_t iw =
                    static_cast<std::ptrdiff_t>(ow * s + kw) - static_cast<std::ptrdiff_t>(n.pad_left);
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                const std::size_t xoff = ((b * H + ih) * W + iw) * Ci;
                const std::size_t k = kh * KW + kw;
                if (dx) {
                  double* dxr = dx + xoff;
                  const double* wk = wt.data() + k * Co * Ci;
                  for (std::size_t co = 0; co < Co; ++co) {
                    const double gv = go[co];
                    const double* wr = wk + co * Ci;
                    for (std::size_t ci = 0; ci < Ci; ++ci) dxr[ci] += gv * wr[ci];
                  }
                }
                if (dk) {
                  double* dkk = dk + k * Ci * Co;
                  for (std::size_t ci = 0; ci < Ci; ++ci) {
                    const double xval = xp[xoff + ci];
                    double* dkr = dkk + ci * Co;
                    for (std::size_t co = 0; co < Co; ++co) dkr[co] += xval * go[co];
                  }
                }
              }
            }
          }
        }
      }
      break;
    }
    case OpKind::dense: {
      const Tensor& xv = nodes_[n.in[0]].value;
      const Tensor& wv = nodes_[n.in[1]].value;
      double* dx = slot(n.in[0]);
      double* dw = slot(n.in[1]);
      double* db = slot(n.in[2]);
      const std::size_t Ci = wv.shape()[0], Co = wv.shape()[1], M = xv.size() / Ci;
      for (std::size_t m = 0; m < M; ++m) {
        const double* go = &g[m * Co];
        if (db)
          for (std::size_t co = 0; co < Co; ++co) db[co] += go[co];
        for (std::size_t ci = 0; ci < Ci; ++ci) {
          const double* wr = wv.values().data() + ci * Co;
          if (dx) {
            double acc = 0.0;
            for (std::size_t co = 0; co < Co; ++co) acc += go[co] * wr[co];
            dx[m * Ci + ci] += acc;
          }
          if (dw) {
            const double xval = xv[m * Ci + ci];
            for (std::size_t co = 0; co < Co; ++co) dw[ci * Co + co] += xval * go[co];
          }
        }
      }
      break;
    }
    case OpKind::relu: {
      if (double* dx = slot(n.in[0]))
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += n.value[i] > 0.0 ? g[i] : 0.0;
      break;
    }
    case OpKind::tanh: {
      if (double* dx = slot(n.in[0]))
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
      break;
    }
    case OpKind::global_avg_pool: {
      if (double* dx = slot(n.in[0])) {
        const Shape& xs = nodes_[n.in[0]].value.shape();
        const std::size_t N = xs[0], HW = xs[1] * xs[2], C = xs[3];
        const double inv = 1.0 / static_cast<double>(HW);
        for (std::size_t b = 0; b < N; ++b)
          for (std::size_t p = 0; p < HW; ++p)
            for (std::size_t c = 0; c < C; ++c) dx[(b * HW + p) * C + c] += g[b * C + c] * inv;
      }
      break;
    }
    case OpKind::add: {
      for (std::size_t k = 0; k < 2; ++k)
        if (double* d = slot(n.in[k]))
          for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      break;
    }
    case OpKind::mul: {
      const Tensor& av = nodes_[n.in[0]].value;
      const Tensor& bv = nodes_[n.in[1]].value;
      if (double* da = slot(n.in[0]))
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
      if (double* db = slot(n.in[1]))
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
      break;
    }
    case OpKind::tile: {
      if (double* dx = slot(n.in[0])) {
        const auto idx = detail::broadcast_index(nodes_[n.in[0]].value.shape(), n.value.shape());
        for (std::size_t i = 0; i < idx.size(); ++i) dx[idx[i]] += g[i];
      }
      break;
    }
    case OpKind::channel_l2: {
      if (double* dx = slot(n.in[0])) {
        const Tensor& xv = nodes_[n.in[0]].value;
        const std::size_t C = xv.shape()[3];
        for (std::size_t p = 0; p < n.value.size(); ++p) {
          const double norm = n.value[p];
          if (norm == 0.0) continue;  // subgradient 0 at the origin
          for (std::size_t c = 0; c < C; ++c) dx[p * C + c] += g[p] * xv[p * C + c] / norm;
        }
      }
      break;
    }
    case OpKind::softmax_cross_entropy: {
      if (double* dx = slot(n.in[0])) {
        const std::size_t N = n.labels.size(), K = n.saved.size() / N;
        const double scale = g[0] / static_cast<double>(N);
        for (std::size_t b = 0; b < N; ++b)
          for (std::size_t k = 0; k < K; ++k)
            dx[b * K + k] += scale * (n.saved[b * K + k] - (k == n.labels[b] ? 1.0 : 0.0));
      }
      break;
    }
    case OpKind::l2_distance: {
      const Tensor& av = nodes_[n.in[0]].value;
      const Tensor& bv = nodes_[n.in[1]].value;
      double* da = slot(n.in[0]);
      double* db = slot(n.in[1]);
      const std::size_t N = n.value.size(), per = av.size() / N;
      for (std::size_t b = 0; b < N; ++b) {
        const double d = n.value[b];
        if (d == 0.0) continue;
        for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
          const double v = g[b] * (av[i] - bv[i]) / d;
          if (da) da[i] += v;
          if (db) db[i] -= v;
        }
      }
      break;
    }
    case OpKind::channel_affine: {
      const Tensor& xv = nodes_[n.in[0]].value;
      const Tensor& gv = nodes_[n.in[1]].value;
      double* dx = slot(n.in[0]);
      double* dg = slot(n.in[1]);
      double* dbeta = slot(n.in[2]);
      const std::size_t C = gv.size();
      for (std::size_t i = 0; i < g.size(); i += C) {
        for (std::size_t c = 0; c < C; ++c) {
          if (dx) dx[i + c] += g[i + c] * gv[c];
          if (dg) dg[c] += g[i + c] * xv[i + c];
          if (dbeta) dbeta[c] += g[i + c];
        }
      }
      break;
    }
    case OpKind::scale: {
      if (double* dx = slot(n.in[0]))
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * n.scalar;
      break;
    }
    case OpKind::batch_norm: {
      if (double* dx = slot(n.in[0])) {
        const std::size_t C = n.saved.size(), M = n.value.size() / C;
        std::vector<double> gmean(C, 0.0), gdot(C, 0.0);
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t c = 0; c < C; ++c) {
            gmean[c] += g[i * C + c];
            gdot[c] += g[i * C + c] * n.value[i * C + c];
          }
        const double inv_m = 1.0 / static_cast<double>(M);
        for (std::size_t i = 0; i < M; ++i)
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t k = i * C + c;
            dx[k] += n.saved[c] * (g[k] - gmean[c] * inv_m - n.value[k] * gdot[c] * inv_m);
          }
      }
      break;
    }
    case OpKind::unit_normalize: {
      if (double* dx = slot(n.in[0])) {
        const Tensor& xv = nodes_[n.in[0]].value;
        const std::size_t N = n.saved.size(), per = xv.size() / N;
        for (std::size_t b = 0; b < N; ++b) {
          const double norm = n.saved[b];
          const std::size_t lo = b * per, hi = (b + 1) * per;
          double raw = 0.0;
          for (std::size_t i = lo; i < hi; ++i) raw += xv[i] * xv[i];
          raw = std::sqrt(raw);
          if (raw <= n.scalar) {
            // Clamped branch: y = x / eps is linear.
            for (std::size_t i = lo; i < hi; ++i) dx[i] += g[i] / norm;
            continue;
          }
          double dot = 0.0;
          for (std::size_t i = lo; i < hi; ++i) dot += g[i] * n.value[i];
          for (std::size_t i = lo; i < hi; ++i) dx[i] += (g[i] - n.value[i] * dot) / norm;
        }
      }
      break;
    }
    case OpKind::weighted_mean: {
      if (double* dx = slot(n.in[0])) {
        if (n.scalar > 0.0)
          for (std::size_t i = 0; i < n.saved.size(); ++i) dx[i] += g[0] * n.saved[i] / n.scalar;
      }
      break;
    }
    case OpKind::sum: {
      if (double* dx = slot(n.in[0]))
        for (std::size_t i = 0; i < nodes_[n.in[0]].value.size(); ++i) dx[i] += g[0];
      break;
    }
    case OpKind::reshape: {
      if (double* dx = slot(n.in[0]))
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

/// Builds a scalar loss from parameter nodes (one per entry of `params`).
using LossBuilder = std::function<Graph::NodeId(Graph&, std::span<const Graph::NodeId>)>;

struct GradCheckEntry {
  std::size_t param = 0;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
};

struct GradCheckOptions {
  double eps = 1e-5;
  /// Check at most this many elements per parameter (evenly strided); 0 = all.
  std::size_t max_elements = 0;
};

/// Compares reverse-mode gradients with central differences.
/// Relative error is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline GradCheckReport grad_check(const LossBuilder& f, std::span<const Tensor> params,
                                  GradCheckOptions opts = {}) {
  if (!(opts.eps > 0.0)) throw ContractError("grad_check: eps must be positive");

  auto evaluate = [&](std::span<const Tensor> ps, bool trainable, Graph& g) {
    std::vector<Graph::NodeId> ids;
    ids.reserve(ps.size());
    for (const auto& p : ps) ids.push_back(trainable ? g.parameter(p) : g.constant(p));
    return std::pair{f(g, ids), ids};
  };

  Graph g;
  auto [loss, ids] = evaluate(params, true, g);
  const Gradients grads = g.backward(loss);

  GradCheckReport report;
  std::vector<Tensor> work(params.begin(), params.end());
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor analytic = grads.of(ids[p]);
    GradCheckEntry entry;
    entry.param = p;
    const std::size_t n = params[p].size();
    const std::size_t step = (opts.max_elements == 0 || n <= opts.max_elements) ? 1 : n / opts.max_elements;
    for (std::size_t i = 0; i < n; i += step) {
      auto at = [&](double delta) {
        std::vector<double> v = params[p].to_vector();
        v[i] += delta;
        work[p] = Tensor(params[p].shape(), std::move(v));
        Graph probe;
        try {
          const double out = probe.value(evaluate(work, false, probe).first).item();
          if (!std::isfinite(out)) throw NumericError("grad_check: non-finite loss at perturbed point");
          return out;
        } catch (const NumericError&) {
          throw NumericError("grad_check: non-finite loss at perturbed point (param " + std::to_string(p) +
                             ", element " + std::to_string(i) + ")");
        }
      };
      const double numeric = (at(opts.eps) - at(-opts.eps)) / (2.0 * opts.eps);
      work[p] = params[p];
      const double a = analytic[i];
      const double abs_err = std::abs(a - numeric);
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, abs_err / std::max(1e-8, std::abs(a) + std::abs(numeric)));
      ++entry.checked;
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace gala
