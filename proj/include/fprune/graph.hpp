#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fprune/ops.hpp"
#include "fprune/tensor.hpp"

namespace fprune {

enum class LayerKind {
  Conv,
  BatchNorm,
  ReLU,
  MaxPool,
  AvgPool,
  GlobalAvgPool,
  Dense,
  Add,
  ShortcutPad,
  Softmax,
};

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

/// Reserved predecessor id that refers to the graph input.
inline constexpr std::string_view kInputId = "input";

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::ReLU;
  std::vector<std::string> inputs;

  ops::ConvParams conv{};        // Conv
  bool bias = false;             // Conv, Dense
  std::size_t channels = 0;      // BatchNorm
  std::size_t pool_kernel = 0;   // MaxPool, AvgPool
  std::size_t pool_stride = 0;   // MaxPool, AvgPool, ShortcutPad
  std::size_t in_features = 0;   // Dense
  std::size_t out_features = 0;  // Dense, ShortcutPad (output channels)
  std::size_t pad_front = 0;     // ShortcutPad

  bool is_parametric() const {
    return kind == LayerKind::Conv || kind == LayerKind::BatchNorm || kind == LayerKind::Dense;
  }

  bool operator==(const LayerSpec&) const = default;
};

/// Per-sample shape: {C, H, W} for feature maps, {F} after a dense layer.
using SampleShape = std::vector<std::size_t>;

/// Layer DAG in topological order. The last node produces the logits.
class ModelGraph {
 public:
  ModelGraph() = default;
  ModelGraph(std::string family, SampleShape input_shape, std::size_t num_classes,
             std::vector<LayerSpec> nodes);

  const std::string& family() const { return family_; }
  const SampleShape& input_shape() const { return input_shape_; }
  std::size_t num_classes() const { return num_classes_; }
  const std::vector<LayerSpec>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  const LayerSpec& node(std::size_t i) const { return nodes_.at(i); }
  std::size_t output_index() const { return nodes_.size() - 1; }

  std::optional<std::size_t> find(std::string_view id) const;
  std::size_t index_of(std::string_view id) const;

  /// Predecessor node indices; -1 stands for the graph input.
  const std::vector<std::vector<int>>& predecessors() const { return preds_; }
  /// Consumer node indices of each node.
  const std::vector<std::vector<std::size_t>>& consumers() const { return consumers_; }
  const std::vector<std::size_t>& input_consumers() const { return input_consumers_; }

  /// Output shape of every node, resolved from the input shape. Throws
  /// ShapeError when any node cannot be resolved.
  const std::vector<SampleShape>& shapes() const { return shapes_; }
  /// Per-sample input shape of node `i` (first predecessor).
  const SampleShape& input_shape_of(std::size_t i) const;

  std::vector<std::size_t> conv_indices() const;

  bool operator==(const ModelGraph& other) const {
    return family_ == other.family_ && input_shape_ == other.input_shape_ &&
           num_classes_ == other.num_classes_ && nodes_ == other.nodes_;
  }

 private:
  void link();
  void infer_shapes();

  std::string family_;
  SampleShape input_shape_;
  std::size_t num_classes_ = 0;
  std::vector<LayerSpec> nodes_;

  std::vector<std::vector<int>> preds_;
  std::vector<std::vector<std::size_t>> consumers_;
  std::vector<std::size_t> input_consumers_;
  std::vector<SampleShape> shapes_;
};

/// Families: "vgg16-cifar", "resnet56", "resnet110", any "resnet<6n+2>" (e.g.
/// "resnet20", "resnet8"), and "cnn2" (two conv blocks plus a classifier).
/// A trailing ":w<k>" divides every width by k ("resnet20:w2"), for desk-scale runs.
ModelGraph build_architecture(std::string_view family, const SampleShape& input_shape,
                              std::size_t num_classes);

}  // namespace fprune
