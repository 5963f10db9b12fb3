#include "fprune/ranking.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cctype>
#include <cfloat>
#include <charconv>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "fprune/config.hpp"
#include "fprune/network.hpp"

namespace fprune {

std::string_view to_string(RankMethod m) {
  switch (m) {
    case RankMethod::L1: return "L1";
    case RankMethod::Beta: return "Beta";
    case RankMethod::HRank: return "HRank";
  }
  return "?";
}

RankMethod rank_method_from_string(std::string_view name) {
  std::string s(name);
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s == "l1") return RankMethod::L1;
  if (s == "beta") return RankMethod::Beta;
  if (s == "hrank") return RankMethod::HRank;
  throw ConfigError("unknown ranking method '" + std::string(name) + "' (expected l1, beta, hrank)");
}

PositionCount position_count(std::size_t n, std::size_t m, std::size_t wn, std::size_t wm,
                             std::size_t stride) {
  if (stride == 0) throw ShapeError("stride must be at least 1");
  if (wn == 0 || wm == 0 || wn > n || wm > m) {
    throw ShapeError("window " + std::to_string(wn) + "x" + std::to_string(wm) +
                     " does not fit a " + std::to_string(n) + "x" + std::to_string(m) + " layer");
  }
  return {(n - wn) / stride + 1, (m - wm) / stride + 1};
}

// ---- window statistics -----------------------------------------------------

namespace {

template <typename T>
LayerWindowStats conv_window_stats(const LayerSpec& node, const BasicTensor<T>& x,
                                   const BasicTensor<T>& y) {
  const ops::ConvParams& cp = node.conv;
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t K = y.dim(1), OH = y.dim(2), OW = y.dim(3);
  LayerWindowStats s;
  s.layer_id = node.id;
  s.positions = position_count(H + 2 * cp.padding, W + 2 * cp.padding, cp.kernel_h, cp.kernel_w,
                               cp.stride);
  if (s.positions != PositionCount{OH, OW}) {
    throw ShapeError("node '" + node.id + "': position count disagrees with the conv output");
  }
  const std::size_t P = OH * OW;
  const double inv_n = 1.0 / static_cast<double>(N);

  // output spread: per filter and position, over samples
  s.sigma_out.assign(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    double acc = 0.0;
    for (std::size_t p = 0; p < P; ++p) {
      double mean = 0.0;
      for (std::size_t n = 0; n < N; ++n) mean += y[(n * K + k) * P + p];
      mean *= inv_n;
      double ss = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const double d = y[(n * K + k) * P + p] - mean;
        ss += d * d;
      }
      acc += std::sqrt(ss * inv_n);
    }
    s.sigma_out[k] = acc / static_cast<double>(P);
  }

  // input spread: each window element is centred on its own across-sample
  // mean, squared deviations pooled over elements with divisor N*|window|
  const double inv_count = 1.0 / static_cast<double>(N * C * cp.kernel_h * cp.kernel_w);
  const auto pad = static_cast<std::ptrdiff_t>(cp.padding);
  std::vector<double> v(N);
  double acc = 0.0;
  for (std::size_t oy = 0; oy < OH; ++oy) {
    for (std::size_t ox = 0; ox < OW; ++ox) {
      const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(oy * cp.stride) - pad;
      const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(ox * cp.stride) - pad;
      double ss = 0.0;
      for (std::size_t r = 0; r < cp.kernel_h; ++r) {
        const std::ptrdiff_t iy = y0 + static_cast<std::ptrdiff_t>(r);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;  // padding: constant 0
        for (std::size_t j = 0; j < cp.kernel_w; ++j) {
          const std::ptrdiff_t ix = x0 + static_cast<std::ptrdiff_t>(j);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
          const std::size_t off = static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix);
          for (std::size_t c = 0; c < C; ++c) {
            double mean = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
              v[n] = static_cast<double>(x[(n * C + c) * H * W + off]);
              mean += v[n];
            }
            mean *= inv_n;
            for (std::size_t n = 0; n < N; ++n) ss += (v[n] - mean) * (v[n] - mean);
          }
        }
      }
      acc += std::sqrt(ss * inv_count);
    }
  }
  s.sigma_in = acc / static_cast<double>(P);
  return s;
}

}  // namespace

template <typename T>
WindowStats window_stats(const ModelGraph& graph, const ModelWeights<T>& weights,
                         const BasicTensor<T>& batch) {
  if (batch.rank() != 4 || batch.dim(0) < 2) {
    throw ConfigError("window statistics need a batch of at least 2 samples");
  }
  WindowStats out;
  forward_streaming<T>(graph, weights, batch,
                       [&](std::size_t i, const BasicTensor<T>& in, const BasicTensor<T>& o) {
                         const LayerSpec& n = graph.node(i);
                         if (n.kind == LayerKind::Conv) out.push_back(conv_window_stats(n, in, o));
                       });
  return out;
}

template <typename T>
std::vector<double> l1_rank(const BasicTensor<T>& w) {
  if (w.empty() || w.rank() != 4) throw ShapeError("L1 rank needs a [K,C,KH,KW] conv weight tensor");
  const std::size_t K = w.dim(0), per = w.size() / K;
  std::vector<double> s(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < per; ++i) acc += std::abs(static_cast<double>(w[k * per + i]));
    s[k] = acc;
  }
  return s;
}

// ---- rank vectors ----------------------------------------------------------

const LayerScores& RankVector::layer(std::string_view id) const {
  for (const auto& l : layers) {
    if (l.layer_id == id) return l;
  }
  throw ConfigError("rank vector has no layer '" + std::string(id) + "'");
}

bool RankVector::operator==(const RankVector& o) const {
  if (method != o.method || batch_seed != o.batch_seed || layers.size() != o.layers.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].layer_id != o.layers[i].layer_id || layers[i].scores != o.layers[i].scores) return false;
  }
  return true;
}

namespace {

const Tensor& conv_weight(const ModelWeights<float>& weights, const std::string& id) {
  const auto it = weights.find(id);
  if (it == weights.end() || it->second.weight.empty()) {
    throw FormatError("missing weights for conv node '" + id + "'");
  }
  return it->second.weight;
}

}  // namespace

RankVector l1_rank(const ModelGraph& graph, const ModelWeights<float>& weights) {
  RankVector r;
  r.method = RankMethod::L1;
  for (std::size_t i : graph.conv_indices()) {
    const std::string& id = graph.node(i).id;
    r.layers.push_back({id, l1_rank(conv_weight(weights, id))});
  }
  return r;
}

RankVector beta_rank_from(const ModelGraph& graph, const ModelWeights<float>& weights,
                          const WindowStats& stats, std::uint64_t batch_seed) {
  (void)graph;
  RankVector r;
  r.method = RankMethod::Beta;
  r.batch_seed = batch_seed;
  for (const LayerWindowStats& s : stats) {
    std::vector<double> score = l1_rank(conv_weight(weights, s.layer_id));
    if (score.size() != s.sigma_out.size()) {
      throw ShapeError("layer '" + s.layer_id + "': window stats do not match the filter count");
    }
    const double denom = std::max(s.sigma_in, kSigmaEps);
    for (std::size_t k = 0; k < score.size(); ++k) score[k] *= s.sigma_out[k] / denom;
    r.layers.push_back({s.layer_id, std::move(score)});
  }
  return r;
}

RankVector beta_rank(const ModelGraph& graph, const ModelWeights<float>& weights,
                     const Tensor& batch, std::uint64_t batch_seed) {
  return beta_rank_from(graph, weights, window_stats(graph, weights, batch), batch_seed);
}

// ---- HRank -----------------------------------------------------------------

double rank_tolerance(double sigma_max, std::size_t rows, std::size_t cols) {
  return static_cast<double>(std::max(rows, cols)) * static_cast<double>(FLT_EPSILON) * sigma_max;
}

std::size_t numerical_rank(std::span<const double> matrix, std::size_t rows, std::size_t cols) {
  if (matrix.size() != rows * cols) throw ShapeError("matrix data does not match its shape");
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const Mat> m(matrix.data(), static_cast<Eigen::Index>(rows),
                                static_cast<Eigen::Index>(cols));
  const Eigen::JacobiSVD<Mat> svd(m);
  const auto& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  const double tol = rank_tolerance(sv(0), rows, cols);
  std::size_t r = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) r += sv(i) > tol;
  return r;
}

std::size_t activation_node_of(const ModelGraph& graph, std::size_t conv) {
  std::size_t cur = conv;
  while (graph.consumers()[cur].size() == 1) {
    const std::size_t next = graph.consumers()[cur][0];
    const LayerKind k = graph.node(next).kind;
    if (k != LayerKind::BatchNorm && k != LayerKind::ReLU) break;
    cur = next;
    if (k == LayerKind::ReLU) break;
  }
  return cur;
}

RankVector hrank_score(const ModelGraph& graph, const ModelWeights<float>& weights,
                       const Tensor& batch, std::uint64_t batch_seed) {
  RankVector r;
  r.method = RankMethod::HRank;
  r.batch_seed = batch_seed;
  const auto convs = graph.conv_indices();
  std::vector<int> slot_of(graph.size(), -1);
  for (std::size_t j = 0; j < convs.size(); ++j) {
    slot_of[activation_node_of(graph, convs[j])] = static_cast<int>(j);
    r.layers.push_back({graph.node(convs[j]).id, {}});
  }
  forward_streaming<float>(graph, weights, batch,
                           [&](std::size_t i, const Tensor&, const Tensor& out) {
                             if (slot_of[i] < 0) return;
                             const std::size_t N = out.dim(0), K = out.dim(1);
                             const std::size_t H = out.dim(2), W = out.dim(3);
                             std::vector<double> scores(K, 0.0), map(H * W);
                             for (std::size_t k = 0; k < K; ++k) {
                               std::size_t total = 0;
                               for (std::size_t n = 0; n < N; ++n) {
                                 const float* src = out.data() + (n * K + k) * H * W;
                                 for (std::size_t e = 0; e < H * W; ++e) map[e] = src[e];
                                 total += numerical_rank(map, H, W);
                               }
                               scores[k] = static_cast<double>(total) / static_cast<double>(N);
                             }
                             r.layers[static_cast<std::size_t>(slot_of[i])].scores = std::move(scores);
                           });
  return r;
}

RankVector rank_filters(RankMethod method, const ModelGraph& graph,
                        const ModelWeights<float>& weights, const Tensor& batch,
                        std::uint64_t batch_seed) {
  switch (method) {
    case RankMethod::L1: {
      RankVector r = l1_rank(graph, weights);
      r.batch_seed = batch_seed;
      return r;
    }
    case RankMethod::Beta: return beta_rank(graph, weights, batch, batch_seed);
    case RankMethod::HRank: return hrank_score(graph, weights, batch, batch_seed);
  }
  throw ConfigError("unknown ranking method");
}

// ---- group analysis --------------------------------------------------------

GroupStats group_stats(std::span<const double> l1_scores, const LayerWindowStats& stats,
                       std::span<const std::size_t> major, std::span<const std::size_t> minor) {
  const std::size_t K = l1_scores.size();
  if (stats.sigma_out.size() != K) throw ShapeError("group stats: L1 scores and window stats disagree");
  if (major.empty() || minor.empty()) throw ConfigError("group stats: both filter groups must be non-empty");
  std::vector<int> member(K, 0);
  for (std::size_t f : major) {
    if (f >= K) throw ConfigError("group stats: filter index " + std::to_string(f) + " out of range");
    member[f] |= 1;
  }
  for (std::size_t f : minor) {
    if (f >= K) throw ConfigError("group stats: filter index " + std::to_string(f) + " out of range");
    if (member[f] & 1) throw ConfigError("group stats: filter " + std::to_string(f) + " is in both groups");
    member[f] |= 2;
  }
  const double denom = std::max(stats.sigma_in, kSigmaEps);
  auto means = [&](std::span<const std::size_t> g, double& l1, double& beta, double& br) {
    l1 = beta = br = 0.0;
    for (std::size_t f : g) {
      const double b = stats.sigma_out[f] / denom;
      l1 += l1_scores[f];
      beta += b;
      br += l1_scores[f] * b;
    }
    const double n = static_cast<double>(g.size());
    l1 /= n;
    beta /= n;
    br /= n;
  };
  GroupStats gs;
  means(major, gs.l1_major, gs.beta_major, gs.betarank_major);
  means(minor, gs.l1_minor, gs.beta_minor, gs.betarank_minor);
  gs.major.assign(major.begin(), major.end());
  gs.minor.assign(minor.begin(), minor.end());
  return gs;
}

// ---- CSV -------------------------------------------------------------------

void write_rank_csv(std::ostream& os, const RankVector& rank) {
  os << "layer_id,filter_index,score,method,batch_seed\n";
  std::ostringstream line;
  line << std::setprecision(17);
  for (const auto& l : rank.layers) {
    for (std::size_t k = 0; k < l.scores.size(); ++k) {
      line.str("");
      line << l.layer_id << ',' << k << ',' << l.scores[k] << ',' << to_string(rank.method) << ','
           << rank.batch_seed << '\n';
      os << line.str();
    }
  }
}

RankVector read_rank_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "layer_id,filter_index,score,method,batch_seed") {
    throw FormatError("rank CSV: missing or unexpected header");
  }
  RankVector r;
  bool first = true;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    while (true) {
      const auto comma = line.find(',', pos);
      f.push_back(line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    const std::string where = "rank CSV line " + std::to_string(line_no);
    if (f.size() != 5) throw FormatError(where + ": expected 5 fields");
    std::size_t index = 0;
    std::uint64_t seed = 0;
    double score = 0.0;
    auto num = [&](const std::string& text, auto& out) {
      const auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
      if (ec != std::errc() || p != text.data() + text.size()) {
        throw FormatError(where + ": bad number '" + text + "'");
      }
    };
    num(f[1], index);
    num(f[2], score);
    num(f[4], seed);
    RankMethod m;
    try {
      m = rank_method_from_string(f[3]);
    } catch (const ConfigError& e) {
      throw FormatError(where + ": " + e.what());
    }
    if (first) {
      r.method = m;
      r.batch_seed = seed;
      first = false;
    } else if (m != r.method || seed != r.batch_seed) {
      throw FormatError(where + ": method/batch_seed differ from earlier rows");
    }
    if (r.layers.empty() || r.layers.back().layer_id != f[0]) {
      for (const auto& l : r.layers) {
        if (l.layer_id == f[0]) throw FormatError(where + ": layer '" + f[0] + "' rows are not contiguous");
      }
      r.layers.push_back({f[0], {}});
    }
    if (index != r.layers.back().scores.size()) {
      throw FormatError(where + ": filter indices of '" + f[0] + "' must run 0,1,2,...");
    }
    r.layers.back().scores.push_back(score);
  }
  if (r.layers.empty()) throw FormatError("rank CSV has no rows");
  return r;
}

template WindowStats window_stats(const ModelGraph&, const ModelWeights<float>&, const Tensor&);
template WindowStats window_stats(const ModelGraph&, const ModelWeights<double>&, const Tensor64&);
template std::vector<double> l1_rank(const Tensor&);
template std::vector<double> l1_rank(const Tensor64&);

}  // namespace fprune
