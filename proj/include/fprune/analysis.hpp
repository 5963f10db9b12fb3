#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fprune/dataio.hpp"
#include "fprune/graph.hpp"
#include "fprune/ranking.hpp"
#include "fprune/weights.hpp"

namespace fprune {

// ---- ranking stability -----------------------------------------------------

struct LayerStability {
  std::string layer_id;
  std::size_t layer_index = 0;  // position among conv layers
  std::size_t filters = 0;
  std::size_t k = 0;
  double top_fraction = 0.0;
  double least_fraction = 0.0;
};

struct StabilityReport {
  std::size_t repetitions = 0;
  double q = 0.25;
  std::vector<std::uint64_t> seeds;
  RankMethod method = RankMethod::L1;
  std::vector<LayerStability> layers;  // skipped layers are absent
  std::vector<std::string> warnings;
};

/// The k best (highest score, lower index on ties) and k worst (lowest
/// score, lower index on ties) filter indices.
std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k);
std::vector<std::size_t> bottom_k(std::span<const double> scores, std::size_t k);

/// |union of the R selections| / (R*k) for one layer scored R times.
struct SelectionFractions {
  double top = 0.0;
  double least = 0.0;
};
SelectionFractions selection_fractions(const std::vector<std::vector<double>>& scores_per_rep,
                                       std::size_t k);

/// Ranks the model on one batch per seed (R = seeds.size() >= 2) and measures
/// how much the top and bottom floor(q*C) selections move, 0 < q < 0.5.
/// Layers where floor(q*C) = 0 are skipped with a warning.
StabilityReport stability_fraction(const ModelGraph& graph, const ModelWeights<float>& weights,
                                   RankMethod method, const Dataset& data, double q,
                                   const std::vector<std::uint64_t>& seeds,
                                   std::size_t batch_size, std::size_t jobs = 1);

/// Centered moving average over `window` entries, truncated at the ends.
std::vector<double> moving_average(std::span<const double> v, std::size_t window = 5);

/// Header `layer_index,top_fraction,least_fraction,top_smoothed,least_smoothed,layer_id`.
void write_stability_csv(std::ostream& os, const StabilityReport& r);

// ---- Grad-CAM ----------------------------------------------------------------

struct GradCamMap {
  std::size_t height = 0, width = 0;
  std::vector<double> heatmap;          // row-major, values in [0, 1]
  int target_class = 0;
  double probability = 0.0;             // softmax probability of target_class
  std::string layer_id;                 // conv whose activations are used
  std::size_t feature_node = 0;         // graph node holding those activations
  std::vector<double> channel_weights;  // spatial mean of the logit gradient
};

/// Node Grad-CAM reads for conv `conv`: the conv's output followed through
/// batch norm and residual adds to the first ReLU.
std::size_t gradcam_feature_node(const ModelGraph& graph, std::size_t conv);

/// Grad-CAM on the last conv layer for one image ([C,H,W] or [1,C,H,W]).
/// Throws ConfigError for a target class out of range or a graph without convs.
template <typename T>
GradCamMap gradcam(const ModelGraph& graph, const ModelWeights<T>& weights,
                   const BasicTensor<T>& image, int target_class);

/// P2 greyscale, values quantized to 0..255.
void write_pgm(std::ostream& os, const GradCamMap& m);
/// `height` rows of `width` comma-separated values.
void write_heatmap_csv(std::ostream& os, const GradCamMap& m);
/// e.g. "gradcam_class2_p0.8731".
std::string gradcam_stem(const GradCamMap& m);

// ---- benchmark ---------------------------------------------------------------

/// Monotonic clock in milliseconds.
using Clock = std::function<double()>;
Clock steady_clock_ms();

struct BenchReport {
  std::string model;
  std::string dataset;
  std::size_t repetitions = 0;
  std::size_t warmup = 0;
  std::vector<double> times_ms;
  std::vector<double> mem_mb;
  double time_mean = 0.0, time_std = 0.0;  // milliseconds, population std
  double mem_mean = 0.0, mem_std = 0.0;    // megabytes (1e6 bytes)
  std::optional<double> time_reduction_pct, mem_reduction_pct;
};

/// W warmup then R timed single-image inferences, sequentially. Memory per run
/// = weight bytes + the tensor-allocation high-water mark above what was live
/// before the run, so the figure is the model's own footprint.
BenchReport bench(const ModelGraph& graph, const ModelWeights<float>& weights,
                  const Tensor& image, std::size_t repetitions, std::size_t warmup,
                  const Clock& clock = steady_clock_ms());

/// Loads a saved model and benchmarks it on a deterministic random image.
BenchReport bench_file(const std::filesystem::path& model, std::size_t repetitions,
                       std::size_t warmup, std::uint64_t seed = 0,
                       const Clock& clock = steady_clock_ms());

/// 100*(1 - report/baseline) for time and memory.
void set_bench_reduction(BenchReport& report, const BenchReport& baseline);

/// Header `model,dataset,time_mean,time_std,mem_mean,mem_std,time_reduction,mem_reduction`.
void write_bench_csv(std::ostream& os, const std::vector<BenchReport>& reports);

}  // namespace fprune
