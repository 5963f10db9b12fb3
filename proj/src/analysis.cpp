#include "fprune/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <ostream>
#include <set>
#include <thread>

#include "fprune/model_io.hpp"
#include "fprune/network.hpp"
#include "fprune/rng.hpp"

namespace fprune {

// ---- ranking stability -----------------------------------------------------

std::vector<std::size_t> top_k(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(std::min(k, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<std::size_t> bottom_k(std::span<const double> scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  idx.resize(std::min(k, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

SelectionFractions selection_fractions(const std::vector<std::vector<double>>& scores_per_rep,
                                       std::size_t k) {
  if (scores_per_rep.size() < 2) throw ConfigError("stability needs at least 2 repetitions");
  if (k == 0) throw ConfigError("stability needs at least one selected filter");
  std::set<std::size_t> top, least;
  for (const auto& s : scores_per_rep) {
    if (s.size() < k) throw ConfigError("fewer filters than the selection size");
    for (auto i : top_k(s, k)) top.insert(i);
    for (auto i : bottom_k(s, k)) least.insert(i);
  }
  const double denom = static_cast<double>(scores_per_rep.size() * k);
  return {static_cast<double>(top.size()) / denom, static_cast<double>(least.size()) / denom};
}

StabilityReport stability_fraction(const ModelGraph& graph, const ModelWeights<float>& weights,
                                   RankMethod method, const Dataset& data, double q,
                                   const std::vector<std::uint64_t>& seeds,
                                   std::size_t batch_size, std::size_t jobs) {
  if (seeds.size() < 2) throw ConfigError("stability needs R >= 2 batch seeds");
  if (!(q > 0.0 && q < 0.5)) throw ConfigError("stability quantile q must lie in (0, 0.5)");
  StabilityReport r;
  r.repetitions = seeds.size();
  r.q = q;
  r.seeds = seeds;
  r.method = method;

  std::vector<RankVector> ranks(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i; (i = next++) < seeds.size();) {
      try {
        const Batch b = sample_batch(data, batch_size, seeds[i]);
        ranks[i] = rank_filters(method, graph, weights, b.images, seeds[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, seeds.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  for (std::size_t l = 0; l < ranks[0].layers.size(); ++l) {
    const std::string& id = ranks[0].layers[l].layer_id;
    const std::size_t c = ranks[0].layers[l].scores.size();
    const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(c)));
    if (k == 0) {
      r.warnings.push_back("layer " + id + " skipped: floor(q*C) = 0 for C = " + std::to_string(c));
      continue;
    }
    std::vector<std::vector<double>> per_rep;
    for (const auto& rv : ranks) per_rep.push_back(rv.layers[l].scores);
    const auto f = selection_fractions(per_rep, k);
    r.layers.push_back({id, l, c, k, f.top, f.least});
  }
  return r;
}

std::vector<double> moving_average(std::span<const double> v, std::size_t window) {
  std::vector<double> out(v.size());
  const std::size_t half = window / 2;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(v.size(), i + half + 1);
    double s = 0.0;
    for (std::size_t j = lo; j < hi; ++j) s += v[j];
    out[i] = s / static_cast<double>(hi - lo);
  }
  return out;
}

void write_stability_csv(std::ostream& os, const StabilityReport& r) {
  std::vector<double> top, least;
  for (const auto& l : r.layers) {
    top.push_back(l.top_fraction);
    least.push_back(l.least_fraction);
  }
  const auto ts = moving_average(top), ls = moving_average(least);
  os << "layer_index,top_fraction,least_fraction,top_smoothed,least_smoothed,layer_id\n";
  char buf[128];
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,", r.layers[i].layer_index, top[i],
                  least[i], ts[i], ls[i]);
    os << buf << r.layers[i].layer_id << '\n';
  }
}

// ---- Grad-CAM ----------------------------------------------------------------

std::size_t gradcam_feature_node(const ModelGraph& graph, std::size_t conv) {
  std::size_t at = conv;
  for (;;) {
    const auto& next = graph.consumers()[at];
    if (next.size() != 1) return at;
    const LayerKind k = graph.node(next[0]).kind;
    if (k != LayerKind::BatchNorm && k != LayerKind::Add && k != LayerKind::ReLU) return at;
    at = next[0];
    if (k == LayerKind::ReLU) return at;
  }
}

template <typename T>
GradCamMap gradcam(const ModelGraph& graph, const ModelWeights<T>& weights,
                   const BasicTensor<T>& image, int target_class) {
  const auto convs = graph.conv_indices();
  if (convs.empty()) throw ConfigError("Grad-CAM needs a model with at least one conv layer");
  if (target_class < 0 || static_cast<std::size_t>(target_class) >= graph.num_classes()) {
    throw ConfigError("target class " + std::to_string(target_class) + " out of range for " +
                      std::to_string(graph.num_classes()) + " classes");
  }
  if (graph.node(graph.output_index()).kind == LayerKind::Softmax) {
    throw ConfigError("Grad-CAM needs a model whose output is the logits");
  }
  const auto& is = graph.input_shape();
  BasicTensor<T> x = image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)})
                                       : image;
  if (x.shape() != Shape{1, is[0], is[1], is[2]}) {
    throw ShapeError("Grad-CAM image shape " + shape_str(image.shape()) +
                     " does not match the model input");
  }

  GradCamMap m;
  m.target_class = target_class;
  m.layer_id = graph.node(convs.back()).id;
  m.feature_node = gradcam_feature_node(graph, convs.back());

  const Activations<T> acts = forward(graph, weights, x, Mode::Eval);
  const BasicTensor<T>& logits = acts.logits();
  const std::size_t classes = logits.size();
  double mx = -INFINITY;
  for (std::size_t j = 0; j < classes; ++j) mx = std::max(mx, static_cast<double>(logits[j]));
  double z = 0.0;
  for (std::size_t j = 0; j < classes; ++j) z += std::exp(static_cast<double>(logits[j]) - mx);
  m.probability = std::exp(static_cast<double>(logits[static_cast<std::size_t>(target_class)]) - mx) / z;

  BasicTensor<T> seed(logits.shape());
  seed[static_cast<std::size_t>(target_class)] = T{1};
  const auto back = backward_from(graph, weights, acts, seed, /*keep_node_grads=*/true);
  const BasicTensor<T>& a = acts.outputs[m.feature_node];
  const BasicTensor<T>& g = back.node_grads[m.feature_node];
  const std::size_t c = a.dim(1), fh = a.dim(2), fw = a.dim(3), plane = fh * fw;

  std::vector<double> cam(plane, 0.0);
  m.channel_weights.assign(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    if (!g.empty()) {
      for (std::size_t j = 0; j < plane; ++j) s += static_cast<double>(g[ch * plane + j]);
    }
    m.channel_weights[ch] = s / static_cast<double>(plane);
    for (std::size_t j = 0; j < plane; ++j) {
      cam[j] += m.channel_weights[ch] * static_cast<double>(a[ch * plane + j]);
    }
  }
  for (double& v : cam) v = std::max(v, 0.0);

  // bilinear, half-pixel centres
  m.height = is[1];
  m.width = is[2];
  m.heatmap.assign(m.height * m.width, 0.0);
  const auto src = [](std::size_t dst, std::size_t from, std::size_t to) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(from) /
                         static_cast<double>(to) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(from - 1));
  };
  for (std::size_t y = 0; y < m.height; ++y) {
    const double sy = src(y, fh, m.height);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, fh - 1);
    const double wy = sy - static_cast<double>(y0);
    for (std::size_t xx = 0; xx < m.width; ++xx) {
      const double sx = src(xx, fw, m.width);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, fw - 1);
      const double wx = sx - static_cast<double>(x0);
      m.heatmap[y * m.width + xx] =
          (1 - wy) * ((1 - wx) * cam[y0 * fw + x0] + wx * cam[y0 * fw + x1]) +
          wy * ((1 - wx) * cam[y1 * fw + x0] + wx * cam[y1 * fw + x1]);
    }
  }
  const double peak = *std::max_element(m.heatmap.begin(), m.heatmap.end());
  if (peak > 0.0) {
    for (double& v : m.heatmap) v /= peak;
  }
  return m;
}

template GradCamMap gradcam(const ModelGraph&, const ModelWeights<float>&, const BasicTensor<float>&, int);
template GradCamMap gradcam(const ModelGraph&, const ModelWeights<double>&, const BasicTensor<double>&, int);

void write_pgm(std::ostream& os, const GradCamMap& m) {
  os << "P2\n" << m.width << ' ' << m.height << "\n255\n";
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x) {
      const long v = std::lround(std::clamp(m.heatmap[y * m.width + x], 0.0, 1.0) * 255.0);
      os << (x ? " " : "") << v;
    }
    os << '\n';
  }
}

void write_heatmap_csv(std::ostream& os, const GradCamMap& m) {
  char buf[32];
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x) {
      std::snprintf(buf, sizeof buf, "%.6f", m.heatmap[y * m.width + x]);
      os << (x ? "," : "") << buf;
    }
    os << '\n';
  }
}

std::string gradcam_stem(const GradCamMap& m) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "gradcam_class%d_p%.4f", m.target_class, m.probability);
  return buf;
}

// ---- benchmark ---------------------------------------------------------------

Clock steady_clock_ms() {
  return [] {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
  };
}

namespace {

std::size_t weight_bytes(const ModelWeights<float>& w) {
  std::size_t n = 0;
  for (const auto& [id, p] : w) {
    for (Slot s : kAllSlots) n += slot_ref(p, s).size() * sizeof(float);
  }
  return n;
}

double pop_std(const std::vector<double>& v, double mean) {
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return v.empty() ? 0.0 : std::sqrt(ss / static_cast<double>(v.size()));
}

}  // namespace

BenchReport bench(const ModelGraph& graph, const ModelWeights<float>& weights,
                  const Tensor& image, std::size_t repetitions, std::size_t warmup,
                  const Clock& clock) {
  if (repetitions < 1) throw ConfigError("bench needs at least one timed repetition");
  BenchReport r;
  r.model = graph.family();
  r.repetitions = repetitions;
  r.warmup = warmup;
  const Tensor x = image.rank() == 3 ? image.reshaped({1, image.dim(0), image.dim(1), image.dim(2)})
                                     : image;
  for (std::size_t i = 0; i < warmup; ++i) (void)predict(graph, weights, x);
  const double wb = static_cast<double>(weight_bytes(weights));
  for (std::size_t i = 0; i < repetitions; ++i) {
    const std::size_t before = alloc_stats().live_bytes;
    reset_alloc_peak();
    const double t0 = clock();
    const Tensor y = predict(graph, weights, x);
    const double t1 = clock();
    const std::size_t peak = alloc_stats().peak_bytes;
    r.times_ms.push_back(t1 - t0);
    r.mem_mb.push_back((wb + static_cast<double>(peak - before)) / 1e6);
  }
  const auto mean = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  r.time_mean = mean(r.times_ms);
  r.time_std = pop_std(r.times_ms, r.time_mean);
  r.mem_mean = mean(r.mem_mb);
  r.mem_std = pop_std(r.mem_mb, r.mem_mean);
  return r;
}

BenchReport bench_file(const std::filesystem::path& model, std::size_t repetitions,
                       std::size_t warmup, std::uint64_t seed, const Clock& clock) {
  const Model m = load_model(model);
  const auto& s = m.graph.input_shape();
  Tensor x({1, s[0], s[1], s[2]});
  Rng rng(seed);
  for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
  BenchReport r = bench(m.graph, m.weights, x, repetitions, warmup, clock);
  r.model = model.stem().string();
  return r;
}

void set_bench_reduction(BenchReport& report, const BenchReport& baseline) {
  report.time_reduction_pct = 100.0 * (1.0 - report.time_mean / baseline.time_mean);
  report.mem_reduction_pct = 100.0 * (1.0 - report.mem_mean / baseline.mem_mean);
}

void write_bench_csv(std::ostream& os, const std::vector<BenchReport>& reports) {
  os << "model,dataset,time_mean,time_std,mem_mean,mem_std,time_reduction,mem_reduction\n";
  char buf[160];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%.4f,%.4f,%.4f,%.4f,", r.time_mean, r.time_std, r.mem_mean,
                  r.mem_std);
    os << r.model << ',' << r.dataset << ',' << buf;
    if (r.time_reduction_pct) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f", *r.time_reduction_pct, *r.mem_reduction_pct);
      os << buf;
    } else {
      os << ',';
    }
    os << '\n';
  }
}

}  // namespace fprune
