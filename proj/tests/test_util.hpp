#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "fprune/graph.hpp"
#include "fprune/network.hpp"
#include "fprune/pruning.hpp"
#include "fprune/rng.hpp"
#include "fprune/tensor.hpp"
#include "fprune/weights.hpp"

namespace fprune::testing {

template <typename T = float>
BasicTensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  BasicTensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
bool bitwise_equal(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
bool bitwise_equal(const ModelWeights<T>& a, const ModelWeights<T>& b) {
  if (a.size() != b.size()) return false;
  for (const auto& [id, p] : a) {
    const auto it = b.find(id);
    if (it == b.end()) return false;
    for (Slot s : kAllSlots) {
      const auto& x = slot_ref(p, s);
      const auto& y = slot_ref(it->second, s);
      if (x.empty() != y.empty()) return false;
      if (!x.empty() && !bitwise_equal(x, y)) return false;
    }
  }
  return true;
}

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template <typename T>
double max_rel_err(const BasicTensor<T>& a, const BasicTensor<T>& b, double floor = 1e-6) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, rel_err(static_cast<double>(a[i]), static_cast<double>(b[i]), floor));
  }
  return m;
}

// ---- graph construction helpers --------------------------------------------

inline LayerSpec conv_node(const std::string& id, const std::string& in, std::size_t cin,
                           std::size_t cout, std::size_t k = 3, std::size_t stride = 1,
                           std::size_t pad = 1, bool bias = false) {
  LayerSpec n;
  n.id = id;
  n.kind = LayerKind::Conv;
  n.inputs = {in};
  n.conv = {k, k, stride, pad, cin, cout};
  n.bias = bias;
  return n;
}

inline LayerSpec bn_node(const std::string& id, const std::string& in, std::size_t c) {
  LayerSpec n;
  n.id = id;
  n.kind = LayerKind::BatchNorm;
  n.inputs = {in};
  n.channels = c;
  return n;
}

inline LayerSpec simple_node(const std::string& id, LayerKind kind, const std::string& in) {
  LayerSpec n;
  n.id = id;
  n.kind = kind;
  n.inputs = {in};
  return n;
}

inline LayerSpec pool_node(const std::string& id, LayerKind kind, const std::string& in,
                           std::size_t k, std::size_t s) {
  LayerSpec n = simple_node(id, kind, in);
  n.pool_kernel = k;
  n.pool_stride = s;
  return n;
}

inline LayerSpec dense_node(const std::string& id, const std::string& in, std::size_t fin,
                            std::size_t fout, bool bias = true) {
  LayerSpec n = simple_node(id, LayerKind::Dense, in);
  n.in_features = fin;
  n.out_features = fout;
  n.bias = bias;
  return n;
}

inline LayerSpec add_node(const std::string& id, const std::string& a, const std::string& b) {
  LayerSpec n;
  n.id = id;
  n.kind = LayerKind::Add;
  n.inputs = {a, b};
  return n;
}

inline LayerSpec shortcut_node(const std::string& id, const std::string& in, std::size_t cin,
                               std::size_t cout, std::size_t stride) {
  LayerSpec n = simple_node(id, LayerKind::ShortcutPad, in);
  n.out_features = cout;
  n.pool_stride = stride;
  n.pad_front = (cout - cin) / 2;
  return n;
}

/// Randomizes every slot, including BN affine and running statistics, so that
/// tests do not depend on the identity-like default initialization.
inline ModelWeights<float> random_weights(const ModelGraph& g, Rng& rng, double scale = 0.5) {
  ModelWeights<float> w = init_weights(g, rng.next_u64());
  for (auto& [id, p] : w) {
    if (!p.weight.empty()) {
      for (float& v : p.weight.values()) v = static_cast<float>(rng.uniform(-scale, scale));
    }
    if (!p.bias.empty()) {
      for (float& v : p.bias.values()) v = static_cast<float>(rng.uniform(-0.2, 0.2));
    }
    if (!p.gamma.empty()) {
      for (float& v : p.gamma.values()) v = static_cast<float>(rng.uniform(0.5, 1.5));
      for (float& v : p.beta.values()) v = static_cast<float>(rng.uniform(-0.3, 0.3));
      for (float& v : p.running_mean.values()) v = static_cast<float>(rng.uniform(-0.2, 0.2));
      for (float& v : p.running_var.values()) v = static_cast<float>(rng.uniform(0.5, 1.5));
    }
  }
  return w;
}

/// Small VGG-style graph: conv-bn-relu, conv-relu-pool, conv-bn-relu, gap, dense.
inline ModelGraph toy_vgg(std::size_t c0 = 3, std::size_t hw = 8, std::size_t classes = 3,
                          std::size_t w1 = 6, std::size_t w2 = 5, std::size_t w3 = 4) {
  std::vector<LayerSpec> n;
  n.push_back(conv_node("c1", "input", c0, w1));
  n.push_back(bn_node("b1", "c1", w1));
  n.push_back(simple_node("r1", LayerKind::ReLU, "b1"));
  n.push_back(conv_node("c2", "r1", w1, w2, 3, 1, 1, true));
  n.push_back(simple_node("r2", LayerKind::ReLU, "c2"));
  n.push_back(pool_node("p2", LayerKind::MaxPool, "r2", 2, 2));
  n.push_back(conv_node("c3", "p2", w2, w3));
  n.push_back(bn_node("b3", "c3", w3));
  n.push_back(simple_node("r3", LayerKind::ReLU, "b3"));
  n.push_back(dense_node("fc", "r3", w3 * (hw / 2) * (hw / 2), classes));
  return ModelGraph("toy-vgg", {c0, hw, hw}, classes, std::move(n));
}

/// conv(bias)-relu-conv(bias)-relu-pool-dense, no batch norm.
inline ModelGraph plain_vgg() {
  std::vector<LayerSpec> n;
  n.push_back(conv_node("c1", "input", 3, 5, 3, 1, 1, true));
  n.push_back(simple_node("r1", LayerKind::ReLU, "c1"));
  n.push_back(conv_node("c2", "r1", 5, 4, 3, 1, 1, true));
  n.push_back(simple_node("r2", LayerKind::ReLU, "c2"));
  n.push_back(pool_node("p2", LayerKind::MaxPool, "r2", 2, 2));
  n.push_back(dense_node("fc", "p2", 4 * 3 * 3, 3));
  return ModelGraph("plain", {3, 6, 6}, 3, std::move(n));
}

/// Small ResNet-style graph with one identity block and one downsampling block.
inline ModelGraph toy_resnet(std::size_t c0 = 3, std::size_t hw = 8, std::size_t classes = 3) {
  std::vector<LayerSpec> n;
  n.push_back(conv_node("stem", "input", c0, 4));
  n.push_back(bn_node("stem_bn", "stem", 4));
  n.push_back(simple_node("stem_relu", LayerKind::ReLU, "stem_bn"));
  n.push_back(conv_node("a_conv1", "stem_relu", 4, 5));
  n.push_back(bn_node("a_bn1", "a_conv1", 5));
  n.push_back(simple_node("a_relu1", LayerKind::ReLU, "a_bn1"));
  n.push_back(conv_node("a_conv2", "a_relu1", 5, 4));
  n.push_back(bn_node("a_bn2", "a_conv2", 4));
  n.push_back(add_node("a_add", "a_bn2", "stem_relu"));
  n.push_back(simple_node("a_relu2", LayerKind::ReLU, "a_add"));
  n.push_back(conv_node("b_conv1", "a_relu2", 4, 6, 3, 2, 1));
  n.push_back(bn_node("b_bn1", "b_conv1", 6));
  n.push_back(simple_node("b_relu1", LayerKind::ReLU, "b_bn1"));
  n.push_back(conv_node("b_conv2", "b_relu1", 6, 8));
  n.push_back(bn_node("b_bn2", "b_conv2", 8));
  n.push_back(shortcut_node("b_short", "a_relu2", 4, 8, 2));
  n.push_back(add_node("b_add", "b_bn2", "b_short"));
  n.push_back(simple_node("b_relu2", LayerKind::ReLU, "b_add"));
  n.push_back(simple_node("gap", LayerKind::GlobalAvgPool, "b_relu2"));
  n.push_back(dense_node("fc", "gap", 8, classes));
  return ModelGraph("toy-resnet", {c0, hw, hw}, classes, std::move(n));
}

/// Random 1-3 conv-layer model: each conv draws channels, kernel, stride,
/// padding and bias, optionally followed by batch norm and/or ReLU, then
/// global pooling and a dense classifier.
inline ModelGraph random_conv_model(Rng& rng, std::size_t max_convs = 3) {
  const std::size_t c0 = 1 + rng.below(3);
  const std::size_t hw0 = 5 + rng.below(4);
  std::size_t hw = hw0;
  const std::size_t convs = 1 + rng.below(max_convs);
  std::vector<LayerSpec> n;
  std::string prev = "input";
  std::size_t cin = c0;
  for (std::size_t i = 0; i < convs; ++i) {
    const std::size_t k = 1 + rng.below(std::min<std::size_t>(3, hw));
    const std::size_t pad = rng.below(2) == 0 ? 0 : k / 2;
    std::size_t stride = 1 + rng.below(2);
    if ((hw + 2 * pad - k) / stride + 1 < 2) stride = 1;
    const std::size_t cout = 2 + rng.below(4);
    const std::string id = "conv" + std::to_string(i);
    n.push_back(conv_node(id, prev, cin, cout, k, stride, pad, rng.below(2) == 1));
    prev = id;
    hw = (hw + 2 * pad - k) / stride + 1;
    if (rng.below(2) == 1) {
      n.push_back(bn_node(id + "_bn", prev, cout));
      prev = id + "_bn";
    }
    if (rng.below(3) != 0) {
      n.push_back(simple_node(id + "_relu", LayerKind::ReLU, prev));
      prev = id + "_relu";
    }
    cin = cout;
  }
  n.push_back(simple_node("gap", LayerKind::GlobalAvgPool, prev));
  n.push_back(dense_node("fc", "gap", cin, 3));
  return ModelGraph("random", {c0, hw0, hw0}, 3, std::move(n));
}

/// Random non-empty kept subsets for a random selection of prunable layers.
inline PruningPlan random_plan(const ModelGraph& g, Rng& rng) {
  PruningPlan plan;
  for (const auto& id : prunable_layers(g)) {
    if (rng.below(4) == 0) continue;
    const std::size_t K = g.node(g.index_of(id)).conv.out_channels;
    std::vector<std::size_t> kept;
    for (std::size_t k = 0; k < K; ++k) {
      if (rng.below(2) == 0) kept.push_back(k);
    }
    if (kept.empty()) kept.push_back(rng.below(K));
    plan.kept[id] = kept;
  }
  return plan;
}

// Central finite differences of `loss(weights)` for every trainable element,
// compared with the analytic gradient.
inline double grad_check(const ModelGraph& g, ModelWeights<double> w, const Tensor64& x,
                         const std::vector<int>& labels, Mode mode) {
  const auto analytic = backward<double>(g, w, x, labels, mode);
  auto loss_at = [&](const ModelWeights<double>& ww, const Tensor64& xx) {
    const auto a = forward<double>(g, ww, xx, mode);
    return cross_entropy<double>(a.logits(), labels, nullptr);
  };
  const double eps = 1e-5;
  double worst = 0.0;
  for (auto& [id, p] : w) {
    for (Slot s : kAllSlots) {
      if (!is_trainable(s)) continue;
      Tensor64& t = slot_ref(p, s);
      const Tensor64& ga = slot_ref(analytic.grads.at(id), s);
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double orig = t[i];
        t[i] = orig + eps;
        const double up = loss_at(w, x);
        t[i] = orig - eps;
        const double down = loss_at(w, x);
        t[i] = orig;
        worst = std::max(worst, rel_err(ga[i], (up - down) / (2 * eps)));
      }
    }
  }
  return worst;
}

}  // namespace fprune::testing
