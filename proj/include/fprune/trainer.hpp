#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fprune/config.hpp"
#include "fprune/dataio.hpp"
#include "fprune/graph.hpp"
#include "fprune/pruning.hpp"
#include "fprune/ranking.hpp"
#include "fprune/weights.hpp"

namespace fprune {

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  /// Fractions of `epochs` at which the rate is multiplied by `lr_factor`.
  std::vector<double> milestones{0.5, 0.75};
  double lr_factor = 0.1;
  std::uint64_t seed = 0;
  /// Random horizontal flip plus a random shift of up to H/8 pixels (zero fill).
  bool augment = false;
};

/// Keys (each optional, after `prefix`): epochs, batch_size, lr, momentum,
/// weight_decay, milestones, lr_factor, seed, augment.
TrainConfig train_config_from(const Config& cfg, const std::string& prefix = "");
void write_train_config(Config& cfg, const TrainConfig& tc, const std::string& prefix = "");

/// Learning rate in effect during `epoch` (0-based).
double lr_at(const TrainConfig& cfg, std::size_t epoch);

/// Non-finite training loss; carries the epoch (0-based) and the first node
/// that produced a non-finite value (-1 for the loss itself).
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, int layer_index, std::size_t epoch)
      : NumericError(what, layer_index), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

 private:
  std::size_t epoch_;
};

struct TrainResult {
  ModelWeights<float> weights;
  std::vector<double> loss_curve;  // per-epoch sample-weighted mean loss
};

/// Momentum SGD on softmax cross-entropy. Batches follow a per-epoch
/// permutation derived from `cfg.seed`, so a run is a pure function of its
/// inputs. lr = 0 freezes the model (batch-norm running statistics included).
TrainResult train(const ModelGraph& graph, const ModelWeights<float>& weights,
                  const Dataset& data, const TrainConfig& cfg);

// ---- evaluation ------------------------------------------------------------

using ConfusionMatrix = std::vector<std::vector<std::uint64_t>>;  // [true][predicted]

struct EvalReport {
  ConfusionMatrix confusion;
  double accuracy = 0.0;  // all metrics in percent
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_specificity = 0.0;
  std::vector<double> precision, recall, specificity;  // per class, percent
};

ConfusionMatrix confusion_matrix(std::span<const int> predicted, std::span<const int> labels,
                                 std::size_t classes);

/// Per-class TP/FP/FN/TN metrics (0 for a zero denominator), unweighted class means.
EvalReport report_from_confusion(const ConfusionMatrix& m);

/// Argmax of each row of [N, K] logits.
std::vector<int> argmax_rows(const Tensor& logits);

std::vector<int> predict_labels(const ModelGraph& graph, const ModelWeights<float>& weights,
                                const Tensor& images, std::size_t batch_size = 100);

/// Throws ConfigError when the dataset's class count differs from the graph's.
EvalReport evaluate(const ModelGraph& graph, const ModelWeights<float>& weights,
                    const Dataset& data);

// ---- experiments -----------------------------------------------------------

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};
MeanStd mean_std(std::span<const double> values);

inline constexpr const char* kMetricNames[] = {"accuracy", "macro_precision", "macro_recall",
                                               "macro_specificity"};
double metric_value(const EvalReport& r, std::string_view metric);

/// Everything one experiment needs; see `experiment_from_config` for the file form.
struct ExperimentConfig {
  std::string dataset = "synthetic";  // synthetic | cifar10
  std::filesystem::path dataset_dir;  // cifar10
  Config data;                        // synthetic generator keys
  std::string architecture = "cnn2";
  std::vector<RankMethod> methods{RankMethod::L1, RankMethod::Beta};
  RateMap rates;
  std::string rates_source;           // preset path or "inline"
  std::size_t repetitions = 3;
  std::uint64_t seed = 0;
  /// All repetitions reuse `seed` unchanged instead of deriving one each.
  bool fixed_seed = false;
  std::size_t calibration_batch = 32;
  std::optional<std::filesystem::path> baseline_model;  // else trained per repetition
  TrainConfig baseline_train;
  TrainConfig finetune;
  bool tolerant = true;
};

/// Keys: dataset, dataset_dir, data.<synthetic key>, architecture, methods,
/// rates (preset path, relative to `base_dir`) or rate.<layer id>,
/// repetitions, seed, fixed_seed, calibration_batch, baseline_model,
/// train.<train key>, finetune.<train key>, tolerant.
ExperimentConfig experiment_from_config(const Config& cfg,
                                        const std::filesystem::path& base_dir = ".");
Config experiment_to_config(const ExperimentConfig& e);

struct RepetitionResult {
  std::size_t repetition = 0;
  std::uint64_t seed = 0;
  EvalReport report;
};

struct MethodResult {
  std::string method;  // "Baseline" or a rank method name
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
  std::vector<RepetitionResult> runs;
};

struct ExperimentResult {
  std::vector<MethodResult> methods;
  std::vector<std::string> warnings;
};

/// Seed of repetition `r`.
std::uint64_t repetition_seed(const ExperimentConfig& e, std::size_t r);

/// Per repetition: train (or load) the baseline, then for every method rank
/// on a calibration batch, select, construct, transfer, fine-tune and
/// evaluate. Methods within a repetition share the baseline, the calibration
/// batch and the fine-tune seed. Repetitions run on up to `jobs` threads;
/// a failure is rethrown with "repetition <r>: " prepended.
ExperimentResult run_experiment(const ExperimentConfig& e, std::size_t jobs = 1);

/// Header `method,flops,params,metric,mean,std`.
void write_aggregate_csv(std::ostream& os, const ExperimentResult& r);
/// Header `method,repetition,seed,accuracy,macro_precision,macro_recall,macro_specificity`.
void write_repetition_csv(std::ostream& os, const ExperimentResult& r);

/// The two datasets an experiment config names.
std::pair<Dataset, Dataset> load_experiment_data(const ExperimentConfig& e);

}  // namespace fprune
