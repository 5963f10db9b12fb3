#include "fprune/weights.hpp"

#include <cmath>

#include "fprune/rng.hpp"

namespace fprune {

std::string_view to_string(Slot slot) {
  switch (slot) {
    case Slot::Weight: return "weight";
    case Slot::Bias: return "bias";
    case Slot::Gamma: return "gamma";
    case Slot::Beta: return "beta";
    case Slot::RunningMean: return "running_mean";
    case Slot::RunningVar: return "running_var";
  }
  return "weight";
}

Slot slot_from_string(std::string_view name) {
  for (Slot s : kAllSlots) {
    if (to_string(s) == name) return s;
  }
  throw FormatError("unknown parameter slot '" + std::string(name) + "'");
}

bool is_trainable(Slot slot) { return slot != Slot::RunningMean && slot != Slot::RunningVar; }

Shape expected_slot_shape(const LayerSpec& node, Slot slot) {
  switch (node.kind) {
    case LayerKind::Conv:
      if (slot == Slot::Weight) return node.conv.weight_shape();
      if (slot == Slot::Bias && node.bias) return {node.conv.out_channels};
      return {};
    case LayerKind::Dense:
      if (slot == Slot::Weight) return {node.out_features, node.in_features};
      if (slot == Slot::Bias && node.bias) return {node.out_features};
      return {};
    case LayerKind::BatchNorm:
      if (slot == Slot::Weight || slot == Slot::Bias) return {};
      return {node.channels};
    default:
      return {};
  }
}

template <typename T>
void validate_weights(const ModelGraph& graph, const ModelWeights<T>& weights) {
  std::size_t parametric = 0;
  for (const LayerSpec& n : graph.nodes()) {
    if (!n.is_parametric()) continue;
    ++parametric;
    const auto it = weights.find(n.id);
    if (it == weights.end()) throw FormatError("missing weights for node '" + n.id + "'");
    for (Slot s : kAllSlots) {
      const Shape want = expected_slot_shape(n, s);
      const BasicTensor<T>& t = slot_ref(it->second, s);
      const Shape have = t.empty() ? Shape{} : t.shape();
      if (want != have) {
        throw FormatError("tensor '" + n.id + "." + std::string(to_string(s)) + "' has shape " +
                          shape_str(have) + ", expected " + shape_str(want));
      }
    }
  }
  if (weights.size() != parametric) throw FormatError("weights contain entries for unknown nodes");
}

ModelWeights<float> init_weights(const ModelGraph& graph, std::uint64_t seed) {
  Rng rng(seed);
  ModelWeights<float> w;
  for (const LayerSpec& n : graph.nodes()) {
    if (!n.is_parametric()) continue;
    ParamSet<float>& p = w[n.id];
    if (n.kind == LayerKind::BatchNorm) {
      p.gamma = Tensor({n.channels}, 1.0f);
      p.beta = Tensor({n.channels}, 0.0f);
      p.running_mean = Tensor({n.channels}, 0.0f);
      p.running_var = Tensor({n.channels}, 1.0f);
      continue;
    }
    const Shape ws = expected_slot_shape(n, Slot::Weight);
    const std::size_t fan_in = shape_numel(ws) / ws[0];
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    p.weight = Tensor(ws);
    for (float& v : p.weight.values()) v = static_cast<float>(rng.normal(0.0, std));
    if (n.bias) p.bias = Tensor(expected_slot_shape(n, Slot::Bias), 0.0f);
  }
  return w;
}

template <typename T>
ModelWeights<T> zeros_like(const ModelWeights<T>& weights, bool trainable_only) {
  ModelWeights<T> out;
  for (const auto& [id, p] : weights) {
    ParamSet<T>& q = out[id];
    for (Slot s : kAllSlots) {
      if (trainable_only && !is_trainable(s)) continue;
      const BasicTensor<T>& t = slot_ref(p, s);
      if (!t.empty()) slot_ref(q, s) = BasicTensor<T>(t.shape());
    }
  }
  return out;
}

template <typename T>
std::size_t trainable_param_count(const ModelWeights<T>& weights) {
  std::size_t n = 0;
  for (const auto& [id, p] : weights) {
    for (Slot s : kAllSlots) {
      if (is_trainable(s)) n += slot_ref(p, s).size();
    }
  }
  return n;
}

template void validate_weights(const ModelGraph&, const ModelWeights<float>&);
template void validate_weights(const ModelGraph&, const ModelWeights<double>&);
template ModelWeights<float> zeros_like(const ModelWeights<float>&, bool);
template ModelWeights<double> zeros_like(const ModelWeights<double>&, bool);
template std::size_t trainable_param_count(const ModelWeights<float>&);
template std::size_t trainable_param_count(const ModelWeights<double>&);

}  // namespace fprune
