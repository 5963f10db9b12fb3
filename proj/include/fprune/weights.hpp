#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "fprune/graph.hpp"
#include "fprune/tensor.hpp"

namespace fprune {

/// Parameter slots of one node. Unused slots stay empty.
template <typename T>
struct ParamSet {
  BasicTensor<T> weight;        // conv [K,C,KH,KW], dense [out,in]
  BasicTensor<T> bias;          // conv/dense, optional
  BasicTensor<T> gamma;         // batch norm
  BasicTensor<T> beta;
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;

  bool operator==(const ParamSet&) const = default;
};

enum class Slot { Weight, Bias, Gamma, Beta, RunningMean, RunningVar };

inline constexpr std::array<Slot, 6> kAllSlots = {Slot::Weight,      Slot::Bias,
                                                  Slot::Gamma,       Slot::Beta,
                                                  Slot::RunningMean, Slot::RunningVar};

std::string_view to_string(Slot slot);
Slot slot_from_string(std::string_view name);
/// Slots updated by the optimizer; running statistics are not.
bool is_trainable(Slot slot);

template <typename T>
BasicTensor<T>& slot_ref(ParamSet<T>& p, Slot s) {
  switch (s) {
    case Slot::Weight: return p.weight;
    case Slot::Bias: return p.bias;
    case Slot::Gamma: return p.gamma;
    case Slot::Beta: return p.beta;
    case Slot::RunningMean: return p.running_mean;
    case Slot::RunningVar: return p.running_var;
  }
  return p.weight;
}

template <typename T>
const BasicTensor<T>& slot_ref(const ParamSet<T>& p, Slot s) {
  return slot_ref(const_cast<ParamSet<T>&>(p), s);
}

/// Node id -> parameters. Gradients use the same container (running-stat
/// slots stay empty).
template <typename T>
using ModelWeights = std::map<std::string, ParamSet<T>>;

/// Shapes every slot of `node` must have; empty shape for unused slots.
Shape expected_slot_shape(const LayerSpec& node, Slot slot);

/// Throws FormatError when a parametric node is missing or a slot shape is off.
template <typename T>
void validate_weights(const ModelGraph& graph, const ModelWeights<T>& weights);

/// He-normal conv/dense weights, zero biases, unit gamma, zero beta, and
/// running statistics (0, 1).
ModelWeights<float> init_weights(const ModelGraph& graph, std::uint64_t seed);

/// Weights of the same graph with every parametric slot zero-filled (gradient buffers).
template <typename T>
ModelWeights<T> zeros_like(const ModelWeights<T>& weights, bool trainable_only);

template <typename U, typename T>
ModelWeights<U> cast_weights(const ModelWeights<T>& weights) {
  ModelWeights<U> out;
  for (const auto& [id, p] : weights) {
    ParamSet<U>& q = out[id];
    for (Slot s : kAllSlots) {
      const BasicTensor<T>& t = slot_ref(p, s);
      if (!t.empty()) slot_ref(q, s) = t.template cast<U>();
    }
  }
  return out;
}

/// Element count of all trainable tensors.
template <typename T>
std::size_t trainable_param_count(const ModelWeights<T>& weights);

}  // namespace fprune
