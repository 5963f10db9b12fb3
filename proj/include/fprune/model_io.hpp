#pragma once

#include <filesystem>
#include <string>

#include "fprune/graph.hpp"
#include "fprune/weights.hpp"

namespace fprune {

inline constexpr int kModelFormatVersion = 1;

struct ModelFiles {
  std::filesystem::path manifest;
  std::filesystem::path blob;
};

/// `stem` -> {stem.manifest, stem.weights}. A path already ending in
/// ".manifest" or ".weights" maps to its sibling pair.
ModelFiles model_files(const std::filesystem::path& stem);

struct Model {
  ModelGraph graph;
  ModelWeights<float> weights;
};

/// Writes the text manifest (layer list, edges, tensor table, format version)
/// and the blob of little-endian float32 values in manifest order.
ModelFiles save_model(const ModelGraph& graph, const ModelWeights<float>& weights,
                      const std::filesystem::path& stem);

/// Throws FileNotFoundError for missing files and FormatError for a malformed
/// manifest, a version mismatch, or a blob whose length disagrees with the
/// declared shapes.
Model load_model(const std::filesystem::path& stem);

std::string manifest_text(const ModelGraph& graph, const ModelWeights<float>& weights,
                          const std::string& blob_name);

}  // namespace fprune
