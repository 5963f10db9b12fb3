#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fprune/graph.hpp"
#include "fprune/ops.hpp"
#include "fprune/weights.hpp"

namespace fprune {

/// Train mode normalizes with batch statistics; Eval uses running statistics.
enum class Mode { Eval, Train };

/// Every node output of one forward pass plus what the backward pass needs.
template <typename T>
struct Activations {
  Mode mode = Mode::Eval;
  BasicTensor<T> input;
  std::vector<BasicTensor<T>> outputs;
  std::vector<ops::BatchNormCache<T>> bn;          // filled for BN nodes in Train mode
  std::vector<std::vector<std::uint32_t>> argmax;  // filled for max-pool nodes

  const BasicTensor<T>& input_of(const ModelGraph& g, std::size_t node, std::size_t k = 0) const {
    const int p = g.predecessors()[node][k];
    return p < 0 ? input : outputs[static_cast<std::size_t>(p)];
  }
  const BasicTensor<T>& logits() const { return outputs.back(); }
};

/// Inference-mode semantics of a single node. `inputs` holds one tensor (two for Add).
template <typename T>
BasicTensor<T> layer_forward(const LayerSpec& node, std::span<const BasicTensor<T>* const> inputs,
                             const ParamSet<T>* params);

/// Full forward pass keeping all activations. In Train mode a NumericError names
/// the first node with a non-finite output.
template <typename T>
Activations<T> forward(const ModelGraph& graph, const ModelWeights<T>& weights,
                       const BasicTensor<T>& input, Mode mode);

/// Called with (node index, first input, output) right after each node runs.
template <typename T>
using NodeVisitor =
    std::function<void(std::size_t, const BasicTensor<T>&, const BasicTensor<T>&)>;

/// Inference-mode pass that keeps only the tensors still awaiting a consumer
/// and shows every node output to `visit`. Returns the logits.
template <typename T>
BasicTensor<T> forward_streaming(const ModelGraph& graph, const ModelWeights<T>& weights,
                                 const BasicTensor<T>& input, const NodeVisitor<T>& visit);

/// Inference-mode logits; intermediate tensors are released as soon as their
/// last consumer has run.
template <typename T>
BasicTensor<T> predict(const ModelGraph& graph, const ModelWeights<T>& weights,
                       const BasicTensor<T>& input);

template <typename T>
struct BackwardResult {
  ModelWeights<T> param_grads;              // trainable slots only
  std::vector<BasicTensor<T>> node_grads;   // d/d(node output), when requested
};

/// Reverse pass seeded with d(objective)/d(logits).
template <typename T>
BackwardResult<T> backward_from(const ModelGraph& graph, const ModelWeights<T>& weights,
                                const Activations<T>& acts, const BasicTensor<T>& grad_logits,
                                bool keep_node_grads = false);

/// Mean softmax cross-entropy and its gradient with respect to the logits.
template <typename T>
double cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels,
                     BasicTensor<T>* grad_logits);

template <typename T>
struct LossAndGrads {
  double loss = 0.0;
  ModelWeights<T> grads;
  Activations<T> acts;
};

/// Forward + softmax cross-entropy + reverse pass. Throws NumericError carrying
/// the offending layer index when the loss is not finite.
template <typename T>
LossAndGrads<T> backward(const ModelGraph& graph, const ModelWeights<T>& weights,
                         const BasicTensor<T>& input, std::span<const int> labels,
                         Mode mode = Mode::Train);

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// v = momentum*v + (g + weight_decay*w); w -= lr*v. `velocity` is created on
/// first use.
template <typename T>
void sgd_step(ModelWeights<T>& weights, const ModelWeights<T>& grads, ModelWeights<T>& velocity,
              const SgdConfig& cfg);

inline constexpr double kBatchNormMomentum = 0.9;

/// running = momentum*running + (1-momentum)*batch for every BN node of a
/// Train-mode pass. The running variance uses the unbiased batch variance.
template <typename T>
void update_running_stats(const ModelGraph& graph, ModelWeights<T>& weights,
                          const Activations<T>& acts, double momentum = kBatchNormMomentum);

}  // namespace fprune
