#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fprune/config.hpp"
#include "fprune/tensor.hpp"

namespace fprune {

enum class Split { Train, Validation };

struct Dataset {
  Tensor images;                          // N x C x H x W, values in [0, 1]
  std::vector<int> labels;                // length N
  std::vector<std::size_t> class_counts;  // per class, sums to N
  Split split = Split::Train;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_counts.size(); }
  Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
};

/// Per-class counts from labels; throws FormatError for a label outside [0, classes).
std::vector<std::size_t> count_classes(std::span<const int> labels, std::size_t classes);

// ---- CIFAR-10 --------------------------------------------------------------

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;

/// One CIFAR-10 binary batch file: records of 1 label byte + 1024 R + 1024 G +
/// 1024 B bytes. Throws FileNotFoundError / FormatError (size not a multiple
/// of 3073, label > 9).
Dataset read_cifar10_file(const std::filesystem::path& path, Split split);

/// `data_batch_1.bin` .. `data_batch_5.bin` and `test_batch.bin` from `dir`.
std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir);

// ---- synthetic imbalanced images -------------------------------------------

/// Oriented sinusoidal grating: value = 0.5 + amplitude * sin(2*pi*frequency*u + phase),
/// u = (x*cos(theta) + y*sin(theta)) / width. `channel_gain` scales the
/// modulation per colour channel.
struct Motif {
  double frequency = 2.0;  // cycles per image width
  double theta = 0.0;      // radians
  double phase = 0.0;
  double amplitude = 0.3;
  std::vector<double> channel_gain;  // empty -> 1 for every channel
};

struct SyntheticSpec {
  std::vector<std::size_t> per_class_counts;
  /// Empty -> max(1, round(validation_fraction * count)) per class.
  std::vector<std::size_t> validation_counts;
  double validation_fraction = 0.25;
  Shape image_size{3, 32, 32};
  /// Empty -> default_motifs(num classes).
  std::vector<Motif> motifs;
  double noise_std = 0.15;
  std::uint64_t seed = 0;
};

/// Classes differ in both orientation and spatial frequency.
std::vector<Motif> default_motifs(std::size_t classes);

/// Three-class preset with the IDRiD grade distribution: 177/41/195 training,
/// 45/10/48 validation.
SyntheticSpec idrid_preset(std::uint64_t seed);

/// Keys: counts, validation_counts, validation_fraction, image_size, noise_std,
/// seed, and per-class motif overrides `motif<c> = frequency theta [phase amplitude]`.
SyntheticSpec synthetic_spec_from_config(const Config& cfg);

/// Train and validation sets. Every image is its class motif plus i.i.d.
/// Gaussian noise, clamped to [0, 1]; samples are shuffled deterministically.
/// The validation noise comes from an independent seed stream.
std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& spec);

// ---- data config -------------------------------------------------------------

/// `dataset = synthetic | cifar10`; cifar10 reads `dataset_dir` (relative to
/// `base_dir`), synthetic reads the generator keys above. A synthetic config
/// without `seed` uses `default_seed`.
std::pair<Dataset, Dataset> load_datasets(const Config& cfg, const std::filesystem::path& base_dir,
                                          std::uint64_t default_seed);

// ---- batches ---------------------------------------------------------------

struct Batch {
  Tensor images;
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // rows of the source dataset
};

/// Rows `indices` of `ds`, in that order.
Batch gather(const Dataset& ds, std::span<const std::size_t> indices);

/// Uniform sample without replacement (partial Fisher-Yates), deterministic per seed.
Batch sample_batch(const Dataset& ds, std::size_t batch_size, std::uint64_t seed);

/// Deterministic permutation of [0, n).
std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed);

}  // namespace fprune
