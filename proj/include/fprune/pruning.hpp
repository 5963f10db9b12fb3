#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "fprune/config.hpp"
#include "fprune/flops.hpp"
#include "fprune/graph.hpp"
#include "fprune/ranking.hpp"
#include "fprune/weights.hpp"

namespace fprune {

using RateMap = std::map<std::string, double>;

struct PruningPlan {
  RateMap rates;                                       // layer id -> pr in (0, 1)
  std::map<std::string, std::vector<std::size_t>> kept;  // strictly increasing
  RankMethod method = RankMethod::L1;

  bool operator==(const PruningPlan&) const = default;
};

/// Survivors of a layer with `count` filters at rate `pr`: count - floor(pr*count), at least 1.
std::size_t keep_count(std::size_t count, double pr);

/// Keeps the highest-scoring filters of every rated layer; equal scores keep
/// the lower index. Layers of `rank` without a rate keep every filter.
/// Throws ConfigError for pr outside (0, 1) or a rate for a layer `rank` lacks.
PruningPlan select_top_filters(const RankVector& rank, const RateMap& rates);

/// Conv layers whose output channels reach a residual add or a padded
/// shortcut (or the logits), so removing filters would break shape equality.
std::vector<std::string> protected_layers(const ModelGraph& graph);

/// Conv layers that may lose filters, in graph order.
std::vector<std::string> prunable_layers(const ModelGraph& graph);

/// Same rate for every prunable layer.
RateMap uniform_rates(const ModelGraph& graph, double pr);

struct PruneOptions {
  /// Rates on protected layers are dropped with a warning instead of an error.
  bool tolerant = true;
};

struct PrunedModel {
  ModelGraph graph;
  ModelWeights<float> weights;
  PruningPlan plan;            // the plan actually applied
  FlopReport baseline;
  FlopReport report;           // reduction percentages relative to `baseline`
  std::vector<std::string> warnings;
};

/// The plan restricted to what can be applied: protected layers keep every
/// filter (warning, or ConfigError when not tolerant). Validates ids and indices.
PruningPlan effective_plan(const ModelGraph& graph, const PruningPlan& plan,
                           const PruneOptions& options, std::vector<std::string>* warnings);

/// Removes pruned filters and every downstream slice that consumed them:
/// next conv input channels, batch-norm vectors, dense input columns.
PrunedModel construct_pruned(const ModelGraph& graph, const ModelWeights<float>& weights,
                             const PruningPlan& plan, const PruneOptions& options = {});

/// Graph surgery only. `plan` must already be effective.
ModelGraph prune_graph(const ModelGraph& graph, const PruningPlan& plan);

/// Index-mapped copy of every surviving element of `weights` (BN running
/// statistics included) into the layout of `pruned`.
ModelWeights<float> transfer_weights(const ModelGraph& original, const ModelWeights<float>& weights,
                                     const PruningPlan& plan, const ModelGraph& pruned);

// ---- text forms ------------------------------------------------------------

/// One line per layer: `layer_id pr kept_index_list` (indices comma-separated),
/// preceded by a `# method <name>` comment.
void write_plan(std::ostream& os, const PruningPlan& plan);
PruningPlan read_plan(std::istream& is);

/// PR preset: a key = value config whose keys are layer ids and values rates.
RateMap rates_from_config(const Config& cfg);
RateMap load_rates(const std::filesystem::path& path);

}  // namespace fprune
