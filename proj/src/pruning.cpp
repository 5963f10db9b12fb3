#include "fprune/pruning.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace fprune {

std::size_t keep_count(std::size_t count, double pr) {
  const auto removed = static_cast<std::size_t>(std::floor(pr * static_cast<double>(count)));
  return removed >= count ? 1 : count - removed;
}

PruningPlan select_top_filters(const RankVector& rank, const RateMap& rates) {
  for (const auto& [id, pr] : rates) {
    if (!(pr > 0.0 && pr < 1.0)) {
      throw ConfigError("pruning rate for '" + id + "' must be in (0, 1), got " + std::to_string(pr));
    }
    bool known = false;
    for (const auto& l : rank.layers) known = known || l.layer_id == id;
    if (!known) throw ConfigError("pruning rate given for unknown layer '" + id + "'");
  }
  PruningPlan plan;
  plan.method = rank.method;
  for (const auto& l : rank.layers) {
    const std::size_t count = l.scores.size();
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    const auto it = rates.find(l.layer_id);
    if (it != rates.end()) {
      plan.rates[l.layer_id] = it->second;
      const std::size_t keep = keep_count(count, it->second);
      // higher score first; stable sort keeps lower indices ahead on ties
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return l.scores[a] > l.scores[b]; });
      order.resize(keep);
      std::sort(order.begin(), order.end());
    }
    plan.kept[l.layer_id] = std::move(order);
  }
  return plan;
}

// ---- channel bookkeeping ---------------------------------------------------

namespace {

constexpr int kFromInput = -1;
constexpr int kFixed = -2;

/// For every node, the conv whose filters index its output channels
/// (kFromInput / kFixed otherwise).
std::vector<int> channel_sources(const ModelGraph& g) {
  std::vector<int> src(g.size(), kFixed);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const LayerSpec& n = g.node(i);
    const int p = g.predecessors()[i][0];
    const int from_pred = p < 0 ? kFromInput : src[static_cast<std::size_t>(p)];
    switch (n.kind) {
      case LayerKind::Conv: src[i] = static_cast<int>(i); break;
      case LayerKind::BatchNorm:
      case LayerKind::ReLU:
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
      case LayerKind::GlobalAvgPool:
      case LayerKind::Softmax: src[i] = from_pred; break;
      default: src[i] = kFixed; break;
    }
  }
  return src;
}

std::vector<bool> protected_mask(const ModelGraph& g, const std::vector<int>& src) {
  std::vector<bool> prot(g.size(), false);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const LayerKind k = g.node(i).kind;
    if (k != LayerKind::Add && k != LayerKind::ShortcutPad) continue;
    for (int p : g.predecessors()[i]) {
      if (p >= 0 && src[static_cast<std::size_t>(p)] >= 0) prot[static_cast<std::size_t>(src[static_cast<std::size_t>(p)])] = true;
    }
  }
  // channels that are themselves the logits cannot change either
  if (src.back() >= 0) prot[static_cast<std::size_t>(src.back())] = true;
  return prot;
}

/// Surviving original channel indices of every node output; empty = unchanged.
std::vector<std::vector<std::size_t>> channel_maps(const ModelGraph& g, const std::vector<int>& src,
                                                   const PruningPlan& plan) {
  std::vector<std::vector<std::size_t>> maps(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (src[i] < 0) continue;
    const auto it = plan.kept.find(g.node(static_cast<std::size_t>(src[i])).id);
    if (it == plan.kept.end()) continue;
    const std::size_t count = g.node(static_cast<std::size_t>(src[i])).conv.out_channels;
    if (it->second.size() != count) maps[i] = it->second;
  }
  return maps;
}

std::vector<std::size_t> iota_n(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

std::vector<std::string> protected_layers(const ModelGraph& graph) {
  const auto src = channel_sources(graph);
  const auto prot = protected_mask(graph, src);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < graph.size(); ++i) {
    if (prot[i]) out.push_back(graph.node(i).id);
  }
  return out;
}

std::vector<std::string> prunable_layers(const ModelGraph& graph) {
  const auto prot = protected_mask(graph, channel_sources(graph));
  std::vector<std::string> out;
  for (std::size_t i : graph.conv_indices()) {
    if (!prot[i]) out.push_back(graph.node(i).id);
  }
  return out;
}

RateMap uniform_rates(const ModelGraph& graph, double pr) {
  RateMap r;
  for (const auto& id : prunable_layers(graph)) r[id] = pr;
  return r;
}

PruningPlan effective_plan(const ModelGraph& graph, const PruningPlan& plan,
                           const PruneOptions& options, std::vector<std::string>* warnings) {
  const auto prot = protected_mask(graph, channel_sources(graph));
  PruningPlan out;
  out.method = plan.method;
  for (const auto& [id, kept] : plan.kept) {
    const auto idx = graph.find(id);
    if (!idx || graph.node(*idx).kind != LayerKind::Conv) {
      throw ConfigError("pruning plan names '" + id + "', which is not a conv layer of the model");
    }
    const std::size_t count = graph.node(*idx).conv.out_channels;
    if (kept.empty()) throw ConfigError("pruning plan keeps no filters of '" + id + "'");
    for (std::size_t k = 0; k < kept.size(); ++k) {
      if (kept[k] >= count || (k > 0 && kept[k] <= kept[k - 1])) {
        throw ConfigError("pruning plan for '" + id + "': kept indices must be increasing and below " +
                          std::to_string(count));
      }
    }
    if (kept.size() < count && prot[*idx]) {
      const std::string msg = "layer '" + id + "' feeds a residual connection; its pruning rate is ignored";
      if (!options.tolerant) throw ConfigError(msg);
      if (warnings) warnings->push_back(msg);
      continue;
    }
    out.kept[id] = kept;
    if (const auto r = plan.rates.find(id); r != plan.rates.end()) out.rates[id] = r->second;
  }
  return out;
}

ModelGraph prune_graph(const ModelGraph& graph, const PruningPlan& plan) {
  const auto src = channel_sources(graph);
  const auto maps = channel_maps(graph, src, plan);
  std::vector<LayerSpec> nodes = graph.nodes();
  for (std::size_t i = 0; i < graph.size(); ++i) {
    LayerSpec& n = nodes[i];
    const int p = graph.predecessors()[i][0];
    const auto* in_map = p < 0 ? nullptr : &maps[static_cast<std::size_t>(p)];
    switch (n.kind) {
      case LayerKind::Conv:
        if (!maps[i].empty()) n.conv.out_channels = maps[i].size();
        if (in_map && !in_map->empty()) n.conv.in_channels = in_map->size();
        break;
      case LayerKind::BatchNorm:
        if (!maps[i].empty()) n.channels = maps[i].size();
        break;
      case LayerKind::Dense:
        if (in_map && !in_map->empty()) {
          const SampleShape& s = graph.input_shape_of(i);
          const std::size_t spatial = s.size() == 3 ? s[1] * s[2] : 1;
          n.in_features = in_map->size() * spatial;
        }
        break;
      default:
        break;
    }
  }
  return ModelGraph(graph.family(), graph.input_shape(), graph.num_classes(), std::move(nodes));
}

ModelWeights<float> transfer_weights(const ModelGraph& original, const ModelWeights<float>& weights,
                                     const PruningPlan& plan, const ModelGraph& pruned) {
  const auto src = channel_sources(original);
  const auto maps = channel_maps(original, src, plan);
  ModelWeights<float> out;
  for (std::size_t i = 0; i < original.size(); ++i) {
    const LayerSpec& n = original.node(i);
    if (!n.is_parametric()) continue;
    const ParamSet<float>& w = weights.at(n.id);
    ParamSet<float>& q = out[n.id];
    const int p = original.predecessors()[i][0];
    const std::vector<std::size_t>* in_map = p < 0 ? nullptr : &maps[static_cast<std::size_t>(p)];
    const bool in_pruned = in_map && !in_map->empty();
    switch (n.kind) {
      case LayerKind::Conv: {
        const std::size_t K = n.conv.out_channels, C = n.conv.in_channels;
        const std::size_t khw = n.conv.kernel_h * n.conv.kernel_w;
        const auto outs = maps[i].empty() ? iota_n(K) : maps[i];
        const auto ins = in_pruned ? *in_map : iota_n(C);
        q.weight = Tensor({outs.size(), ins.size(), n.conv.kernel_h, n.conv.kernel_w});
        for (std::size_t a = 0; a < outs.size(); ++a) {
          for (std::size_t b = 0; b < ins.size(); ++b) {
            const float* from = w.weight.data() + (outs[a] * C + ins[b]) * khw;
            std::copy(from, from + khw, q.weight.data() + (a * ins.size() + b) * khw);
          }
        }
        if (!w.bias.empty()) {
          q.bias = Tensor({outs.size()});
          for (std::size_t a = 0; a < outs.size(); ++a) q.bias[a] = w.bias[outs[a]];
        }
        break;
      }
      case LayerKind::BatchNorm: {
        if (maps[i].empty()) {
          q = w;
          break;
        }
        for (Slot s : {Slot::Gamma, Slot::Beta, Slot::RunningMean, Slot::RunningVar}) {
          const Tensor& from = slot_ref(w, s);
          Tensor& to = slot_ref(q, s);
          to = Tensor({maps[i].size()});
          for (std::size_t a = 0; a < maps[i].size(); ++a) to[a] = from[maps[i][a]];
        }
        break;
      }
      case LayerKind::Dense: {
        if (!in_pruned) {
          q = w;
          break;
        }
        const SampleShape& s = original.input_shape_of(i);
        const std::size_t spatial = s.size() == 3 ? s[1] * s[2] : 1;
        const std::size_t out_f = n.out_features, in_old = n.in_features;
        const std::size_t in_new = in_map->size() * spatial;
        q.weight = Tensor({out_f, in_new});
        for (std::size_t o = 0; o < out_f; ++o) {
          for (std::size_t a = 0; a < in_map->size(); ++a) {
            const float* from = w.weight.data() + o * in_old + (*in_map)[a] * spatial;
            std::copy(from, from + spatial, q.weight.data() + o * in_new + a * spatial);
          }
        }
        q.bias = w.bias;
        break;
      }
      default:
        break;
    }
  }
  validate_weights(pruned, out);
  return out;
}

PrunedModel construct_pruned(const ModelGraph& graph, const ModelWeights<float>& weights,
                             const PruningPlan& plan, const PruneOptions& options) {
  PrunedModel m;
  m.plan = effective_plan(graph, plan, options, &m.warnings);
  m.graph = prune_graph(graph, m.plan);
  m.weights = transfer_weights(graph, weights, m.plan, m.graph);
  m.baseline = count_flops_params(graph);
  m.report = count_flops_params(m.graph);
  set_reduction(m.report, m.baseline);
  return m;
}

// ---- text forms ------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

}  // namespace

void write_plan(std::ostream& os, const PruningPlan& plan) {
  os << "# method " << to_string(plan.method) << '\n';
  for (const auto& [id, kept] : plan.kept) {
    const auto r = plan.rates.find(id);
    os << id << ' ' << (r == plan.rates.end() ? "0" : format_double(r->second)) << ' ';
    for (std::size_t k = 0; k < kept.size(); ++k) os << (k ? "," : "") << kept[k];
    os << '\n';
  }
}

PruningPlan read_plan(std::istream& is) {
  PruningPlan plan;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (line[0] == '#') {
      std::string hash, key, value;
      if (ls >> hash >> key >> value && key == "method") plan.method = rank_method_from_string(value);
      continue;
    }
    std::string id, pr_text, list;
    if (!(ls >> id >> pr_text >> list)) {
      throw FormatError("plan line " + std::to_string(line_no) + ": expected 'layer_id pr kept_index_list'");
    }
    double pr = 0.0;
    if (const auto [p, ec] = std::from_chars(pr_text.data(), pr_text.data() + pr_text.size(), pr);
        ec != std::errc() || p != pr_text.data() + pr_text.size()) {
      throw FormatError("plan line " + std::to_string(line_no) + ": bad rate '" + pr_text + "'");
    }
    std::vector<std::size_t> kept;
    for (const auto& piece : split_list(list)) {
      std::size_t k = 0;
      const auto [p, ec] = std::from_chars(piece.data(), piece.data() + piece.size(), k);
      if (ec != std::errc() || p != piece.data() + piece.size()) {
        throw FormatError("plan line " + std::to_string(line_no) + ": bad index '" + piece + "'");
      }
      kept.push_back(k);
    }
    if (pr != 0.0) plan.rates[id] = pr;
    plan.kept[id] = std::move(kept);
  }
  return plan;
}

RateMap rates_from_config(const Config& cfg) {
  RateMap r;
  for (const auto& [key, value] : cfg.entries()) r[key] = cfg.get_double(key);
  return r;
}

RateMap load_rates(const std::filesystem::path& path) { return rates_from_config(Config::load(path)); }

}  // namespace fprune
