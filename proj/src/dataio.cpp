#include "fprune/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>

#include "fprune/rng.hpp"

namespace fprune {

namespace fs = std::filesystem;

std::vector<std::size_t> count_classes(std::span<const int> labels, std::size_t classes) {
  std::vector<std::size_t> counts(classes, 0);
  for (const int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw FormatError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
    ++counts[static_cast<std::size_t>(y)];
  }
  return counts;
}

// ---- CIFAR-10 --------------------------------------------------------------

Dataset read_cifar10_file(const fs::path& path, Split split) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFoundError("CIFAR-10 batch file not found: " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) +
                      " is not a positive multiple of " + std::to_string(kCifarRecordBytes));
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Dataset ds;
  ds.split = split;
  ds.images = Tensor({n, 3, 32, 32});
  ds.labels.resize(n);
  float* px = ds.images.data();
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * kCifarRecordBytes;
    ds.labels[i] = rec[0];
    // planes are already in C,H,W order
    for (std::size_t j = 1; j < kCifarRecordBytes; ++j) *px++ = static_cast<float>(rec[j]) / 255.0f;
  }
  ds.class_counts = count_classes(ds.labels, 10);
  return ds;
}

namespace {

Dataset concat(std::vector<Dataset> parts) {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  Dataset out;
  out.split = parts.front().split;
  Shape shape = parts.front().images.shape();
  shape[0] = n;
  out.images = Tensor(shape);
  float* dst = out.images.data();
  for (const auto& p : parts) {
    std::memcpy(dst, p.images.data(), p.images.size() * sizeof(float));
    dst += p.images.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  out.class_counts = count_classes(out.labels, parts.front().num_classes());
  return out;
}

}  // namespace

std::pair<Dataset, Dataset> load_cifar10(const fs::path& dir) {
  std::vector<Dataset> train;
  for (int b = 1; b <= 5; ++b) {
    train.push_back(read_cifar10_file(dir / ("data_batch_" + std::to_string(b) + ".bin"), Split::Train));
  }
  Dataset val = read_cifar10_file(dir / "test_batch.bin", Split::Validation);
  return {concat(std::move(train)), std::move(val)};
}

// ---- synthetic -------------------------------------------------------------

std::vector<Motif> default_motifs(std::size_t classes) {
  std::vector<Motif> m(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    m[c].theta = std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
    m[c].frequency = 2.0 + 1.5 * static_cast<double>(c);
    m[c].phase = 0.0;
    m[c].amplitude = 0.3;
  }
  return m;
}

SyntheticSpec idrid_preset(std::uint64_t seed) {
  SyntheticSpec s;
  s.per_class_counts = {177, 41, 195};
  s.validation_counts = {45, 10, 48};
  s.seed = seed;
  return s;
}

SyntheticSpec synthetic_spec_from_config(const Config& cfg) {
  SyntheticSpec s;
  if (cfg.has("preset")) {
    if (cfg.get_string("preset") != "idrid") {
      throw ConfigError("unknown synthetic preset '" + cfg.get_string("preset") + "'");
    }
    s = idrid_preset(0);
  }
  if (cfg.has("counts")) s.per_class_counts = cfg.get_sizes("counts");
  if (cfg.has("validation_counts")) s.validation_counts = cfg.get_sizes("validation_counts");
  s.validation_fraction = cfg.get_double("validation_fraction", s.validation_fraction);
  if (cfg.has("image_size")) s.image_size = cfg.get_sizes("image_size");
  s.noise_std = cfg.get_double("noise_std", s.noise_std);
  s.seed = cfg.get_u64("seed", s.seed);
  const std::size_t classes = s.per_class_counts.size();
  for (std::size_t c = 0; c < classes; ++c) {
    const std::string key = "motif" + std::to_string(c);
    if (!cfg.has(key)) continue;
    if (s.motifs.empty()) s.motifs = default_motifs(classes);
    const auto v = cfg.get_doubles(key);
    if (v.size() < 2 || v.size() > 4) {
      throw ConfigError("config key '" + key + "': expected 'frequency theta [phase amplitude]'");
    }
    s.motifs[c].frequency = v[0];
    s.motifs[c].theta = v[1];
    if (v.size() > 2) s.motifs[c].phase = v[2];
    if (v.size() > 3) s.motifs[c].amplitude = v[3];
  }
  return s;
}

namespace {

void check_spec(const SyntheticSpec& s) {
  if (s.per_class_counts.size() < 2) throw ConfigError("synthetic data needs at least 2 classes");
  for (std::size_t c = 0; c < s.per_class_counts.size(); ++c) {
    if (s.per_class_counts[c] == 0) {
      throw ConfigError("synthetic class " + std::to_string(c) + " has zero samples");
    }
  }
  if (!s.validation_counts.empty() && s.validation_counts.size() != s.per_class_counts.size()) {
    throw ConfigError("validation_counts must list one count per class");
  }
  for (std::size_t c = 0; c < s.validation_counts.size(); ++c) {
    if (s.validation_counts[c] == 0) {
      throw ConfigError("synthetic validation class " + std::to_string(c) + " has zero samples");
    }
  }
  if (!s.motifs.empty() && s.motifs.size() != s.per_class_counts.size()) {
    throw ConfigError("motifs must list one entry per class");
  }
  if (s.image_size.size() != 3) throw ConfigError("image_size must be C H W");
  if (!(s.noise_std >= 0.0)) throw ConfigError("noise_std must be non-negative");
}

Tensor render_motif(const Motif& m, const Shape& size) {
  const std::size_t C = size[0], H = size[1], W = size[2];
  Tensor img({C, H, W});
  const double ct = std::cos(m.theta), st = std::sin(m.theta);
  for (std::size_t c = 0; c < C; ++c) {
    const double gain = c < m.channel_gain.size() ? m.channel_gain[c] : 1.0;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double u = (static_cast<double>(x) * ct + static_cast<double>(y) * st) / static_cast<double>(W);
        const double v = 0.5 + gain * m.amplitude * std::sin(2.0 * std::numbers::pi * m.frequency * u + m.phase);
        img[(c * H + y) * W + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

Dataset synthesize(const std::vector<Tensor>& motifs, const std::vector<std::size_t>& counts,
                   double noise_std, std::uint64_t seed, Split split) {
  std::vector<int> labels;
  for (std::size_t c = 0; c < counts.size(); ++c) labels.insert(labels.end(), counts[c], static_cast<int>(c));
  const auto order = permutation(labels.size(), mix_seed(seed, 0));

  const Shape& s = motifs.front().shape();
  const std::size_t per = motifs.front().size();
  Dataset ds;
  ds.split = split;
  ds.images = Tensor({labels.size(), s[0], s[1], s[2]});
  ds.labels.resize(labels.size());
  Rng noise(mix_seed(seed, 1));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[order[i]];
    ds.labels[i] = y;
    const Tensor& m = motifs[static_cast<std::size_t>(y)];
    float* dst = ds.images.data() + i * per;
    for (std::size_t j = 0; j < per; ++j) {
      double v = m[j];
      if (noise_std > 0.0) v += noise_std * noise.normal();
      dst[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  ds.class_counts = count_classes(ds.labels, counts.size());
  return ds;
}

}  // namespace

std::pair<Dataset, Dataset> generate_synthetic(const SyntheticSpec& spec) {
  check_spec(spec);
  const std::size_t classes = spec.per_class_counts.size();
  const auto motif_params = spec.motifs.empty() ? default_motifs(classes) : spec.motifs;
  std::vector<Tensor> motifs;
  for (const auto& m : motif_params) motifs.push_back(render_motif(m, spec.image_size));

  std::vector<std::size_t> val_counts = spec.validation_counts;
  if (val_counts.empty()) {
    for (const std::size_t n : spec.per_class_counts) {
      val_counts.push_back(std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(spec.validation_fraction * static_cast<double>(n)))));
    }
  }
  return {synthesize(motifs, spec.per_class_counts, spec.noise_std, mix_seed(spec.seed, 100), Split::Train),
          synthesize(motifs, val_counts, spec.noise_std, mix_seed(spec.seed, 200), Split::Validation)};
}

std::pair<Dataset, Dataset> load_datasets(const Config& cfg, const fs::path& base_dir,
                                          std::uint64_t default_seed) {
  const std::string kind = cfg.get_string("dataset", "synthetic");
  if (kind == "cifar10") {
    if (!cfg.has("dataset_dir")) throw ConfigError("cifar10 data needs 'dataset_dir'");
    const fs::path dir = cfg.get_string("dataset_dir");
    return load_cifar10(dir.is_absolute() ? dir : base_dir / dir);
  }
  if (kind != "synthetic") {
    throw ConfigError("config key 'dataset': expected synthetic or cifar10, got '" + kind + "'");
  }
  SyntheticSpec spec = synthetic_spec_from_config(cfg);
  if (!cfg.has("seed")) spec.seed = default_seed;
  return generate_synthetic(spec);
}

// ---- batches ---------------------------------------------------------------

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

Batch gather(const Dataset& ds, std::span<const std::size_t> indices) {
  Batch b;
  Shape shape = ds.images.shape();
  shape[0] = indices.size();
  b.images = Tensor(shape);
  const std::size_t per = ds.images.size() / ds.size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t row = indices[i];
    if (row >= ds.size()) throw ShapeError("batch index " + std::to_string(row) + " out of range");
    std::memcpy(b.images.data() + i * per, ds.images.data() + row * per, per * sizeof(float));
    b.labels.push_back(ds.labels[row]);
  }
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

Batch sample_batch(const Dataset& ds, std::size_t batch_size, std::uint64_t seed) {
  const std::size_t n = ds.size();
  if (batch_size == 0 || batch_size > n) {
    throw ConfigError("batch size " + std::to_string(batch_size) + " must be in [1, " +
                      std::to_string(n) + "]");
  }
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < batch_size; ++i) std::swap(p[i], p[i + rng.below(n - i)]);
  p.resize(batch_size);
  return gather(ds, p);
}

}  // namespace fprune
