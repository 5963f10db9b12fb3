#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fprune/graph.hpp"
#include "fprune/tensor.hpp"
#include "fprune/weights.hpp"

namespace fprune {

/// Guard on the input spread in the beta fraction.
inline constexpr double kSigmaEps = 1e-12;

enum class RankMethod { L1, Beta, HRank };

std::string_view to_string(RankMethod m);          // "L1", "Beta", "HRank"
RankMethod rank_method_from_string(std::string_view name);  // case-insensitive

struct PositionCount {
  std::size_t n1 = 0;
  std::size_t n2 = 0;
  bool operator==(const PositionCount&) const = default;
};

/// Number of window placements on an (n, m) grid: floor((n - wn)/s) + 1 by
/// floor((m - wm)/s) + 1, i.e. the convolution's output size when (n, m)
/// includes the padding.
PositionCount position_count(std::size_t n, std::size_t m, std::size_t wn, std::size_t wm,
                             std::size_t stride);

/// Spread statistics of one conv layer over a batch.
struct LayerWindowStats {
  std::string layer_id;
  /// Mean over positions of the pooled input-window spread: every window
  /// element (channel x kh x kw, padding zeros included) is centred on its
  /// mean over the N samples, and the squared deviations are pooled with
  /// divisor N * |window|.
  double sigma_in = 0.0;
  /// Per filter: mean over positions of the population std of the N raw
  /// (pre-activation) outputs.
  std::vector<double> sigma_out;
  PositionCount positions;
};

using WindowStats = std::vector<LayerWindowStats>;  // conv layers in graph order

/// One streaming inference pass over `batch` (N >= 2). Throws ConfigError for N < 2.
template <typename T>
WindowStats window_stats(const ModelGraph& graph, const ModelWeights<T>& weights,
                         const BasicTensor<T>& batch);

/// Sum of |w| over each filter of a [K, C, KH, KW] weight tensor.
template <typename T>
std::vector<double> l1_rank(const BasicTensor<T>& conv_weight);

struct LayerScores {
  std::string layer_id;
  std::vector<double> scores;  // one per filter
};

struct RankVector {
  RankMethod method = RankMethod::L1;
  std::uint64_t batch_seed = 0;
  std::vector<LayerScores> layers;

  const LayerScores& layer(std::string_view id) const;
  bool operator==(const RankVector& o) const;
};

RankVector l1_rank(const ModelGraph& graph, const ModelWeights<float>& weights);

/// score_k = L1(k) * sigma_out(k) / max(sigma_in, kSigmaEps).
RankVector beta_rank(const ModelGraph& graph, const ModelWeights<float>& weights,
                     const Tensor& batch, std::uint64_t batch_seed);
RankVector beta_rank_from(const ModelGraph& graph, const ModelWeights<float>& weights,
                          const WindowStats& stats, std::uint64_t batch_seed);

/// Numerical rank: count of singular values above
/// max(rows, cols) * float-epsilon * largest singular value.
std::size_t numerical_rank(std::span<const double> matrix, std::size_t rows, std::size_t cols);
double rank_tolerance(double sigma_max, std::size_t rows, std::size_t cols);

/// Node whose output HRank inspects for conv node `conv`: the conv's
/// batch-norm/ReLU chain followed up to and including the first ReLU.
std::size_t activation_node_of(const ModelGraph& graph, std::size_t conv);

/// Per filter: batch mean of the numerical rank of its post-activation map.
RankVector hrank_score(const ModelGraph& graph, const ModelWeights<float>& weights,
                       const Tensor& batch, std::uint64_t batch_seed);

/// Any method; `batch` is ignored for L1.
RankVector rank_filters(RankMethod method, const ModelGraph& graph,
                        const ModelWeights<float>& weights, const Tensor& batch,
                        std::uint64_t batch_seed);

// ---- group analysis --------------------------------------------------------

struct GroupStats {
  double l1_major = 0.0, l1_minor = 0.0;
  double beta_major = 0.0, beta_minor = 0.0;
  double betarank_major = 0.0, betarank_minor = 0.0;  // mean of products
  std::vector<std::size_t> major, minor;
};

/// Arithmetic means over two disjoint non-empty filter groups of one layer.
GroupStats group_stats(std::span<const double> l1_scores, const LayerWindowStats& stats,
                       std::span<const std::size_t> major, std::span<const std::size_t> minor);

// ---- CSV -------------------------------------------------------------------

/// Header `layer_id,filter_index,score,method,batch_seed`; scores printed with
/// 17 significant digits so a read round-trips exactly.
void write_rank_csv(std::ostream& os, const RankVector& rank);
RankVector read_rank_csv(std::istream& is);

}  // namespace fprune
