#include "fprune/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <ostream>
#include <thread>

#include "fprune/model_io.hpp"
#include "fprune/network.hpp"
#include "fprune/rng.hpp"

namespace fprune {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string join(const std::vector<std::string>& parts) {
  std::string s;
  for (const auto& p : parts) {
    if (!s.empty()) s += ", ";
    s += p;
  }
  return s;
}

// Flip and shift every image of `x` in place.
void augment_batch(Tensor& x, Rng& rng) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t pad = std::max<std::size_t>(1, h / 8);
  std::vector<float> img(c * h * w);
  for (std::size_t i = 0; i < n; ++i) {
    float* p = x.data() + i * c * h * w;
    const bool flip = rng.uniform() < 0.5;
    const auto dy = static_cast<std::ptrdiff_t>(rng.below(2 * pad + 1)) - static_cast<std::ptrdiff_t>(pad);
    const auto dx = static_cast<std::ptrdiff_t>(rng.below(2 * pad + 1)) - static_cast<std::ptrdiff_t>(pad);
    std::copy(p, p + img.size(), img.begin());
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) {
          const auto sy = static_cast<std::ptrdiff_t>(y) + dy;
          auto sx = static_cast<std::ptrdiff_t>(flip ? w - 1 - xx : xx) + dx;
          float v = 0.0f;
          if (sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) &&
              sx < static_cast<std::ptrdiff_t>(w)) {
            v = img[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
          }
          p[(ch * h + y) * w + xx] = v;
        }
      }
    }
  }
}

void check_classes(const ModelGraph& graph, const Dataset& data) {
  if (data.num_classes() != graph.num_classes()) {
    throw ConfigError("dataset has " + std::to_string(data.num_classes()) +
                      " classes but the model outputs " + std::to_string(graph.num_classes()));
  }
}

}  // namespace

TrainConfig train_config_from(const Config& cfg, const std::string& prefix) {
  TrainConfig t;
  const auto k = [&](const char* name) { return prefix + name; };
  const auto epochs = cfg.get_int(k("epochs"), static_cast<std::int64_t>(t.epochs));
  const auto batch = cfg.get_int(k("batch_size"), static_cast<std::int64_t>(t.batch_size));
  if (epochs < 0) throw ConfigError("config key '" + k("epochs") + "': must be >= 0");
  if (batch < 1) throw ConfigError("config key '" + k("batch_size") + "': must be >= 1");
  t.epochs = static_cast<std::size_t>(epochs);
  t.batch_size = static_cast<std::size_t>(batch);
  t.lr = cfg.get_double(k("lr"), t.lr);
  t.momentum = cfg.get_double(k("momentum"), t.momentum);
  t.weight_decay = cfg.get_double(k("weight_decay"), t.weight_decay);
  if (cfg.has(k("milestones"))) t.milestones = cfg.get_doubles(k("milestones"));
  t.lr_factor = cfg.get_double(k("lr_factor"), t.lr_factor);
  t.seed = cfg.get_u64(k("seed"), t.seed);
  t.augment = cfg.get_bool(k("augment"), t.augment);
  if (t.lr < 0) throw ConfigError("config key '" + k("lr") + "': must be >= 0");
  return t;
}

void write_train_config(Config& cfg, const TrainConfig& t, const std::string& prefix) {
  cfg.set(prefix + "epochs", std::to_string(t.epochs));
  cfg.set(prefix + "batch_size", std::to_string(t.batch_size));
  cfg.set(prefix + "lr", fmt_double(t.lr));
  cfg.set(prefix + "momentum", fmt_double(t.momentum));
  cfg.set(prefix + "weight_decay", fmt_double(t.weight_decay));
  std::vector<std::string> ms;
  for (double m : t.milestones) ms.push_back(fmt_double(m));
  cfg.set(prefix + "milestones", join(ms));
  cfg.set(prefix + "lr_factor", fmt_double(t.lr_factor));
  cfg.set(prefix + "seed", std::to_string(t.seed));
  cfg.set(prefix + "augment", t.augment ? "true" : "false");
}

double lr_at(const TrainConfig& cfg, std::size_t epoch) {
  double lr = cfg.lr;
  for (double m : cfg.milestones) {
    // a milestone never lands on the first epoch, so short runs train at `lr`
    const auto at = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(m * static_cast<double>(cfg.epochs))));
    if (epoch >= at) lr *= cfg.lr_factor;
  }
  return lr;
}

TrainResult train(const ModelGraph& graph, const ModelWeights<float>& weights,
                  const Dataset& data, const TrainConfig& cfg) {
  check_classes(graph, data);
  if (cfg.epochs < 1) throw ConfigError("training needs at least one epoch");
  if (cfg.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (data.size() == 0) throw ConfigError("training set is empty");
  validate_weights(graph, weights);

  TrainResult out{weights, {}};
  ModelWeights<float> velocity;
  const bool frozen = cfg.lr == 0.0;
  const std::size_t n = data.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = permutation(n, mix_seed(cfg.seed, epoch));
    Rng aug_rng(mix_seed(cfg.seed, 1'000'000 + epoch));
    const SgdConfig sgd{lr_at(cfg, epoch), cfg.momentum, cfg.weight_decay};
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0, stop; start < n; start = stop) {
      stop = std::min(n, start + cfg.batch_size);
      // a lone trailing sample would give batch norm a zero variance
      if (n - stop == 1) stop = n;
      Batch b = gather(data, std::span(order).subspan(start, stop - start));
      if (cfg.augment) augment_batch(b.images, aug_rng);
      LossAndGrads<float> lg;
      try {
        lg = backward(graph, out.weights, b.images, b.labels, Mode::Train);
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + ": " +
                                  e.what(),
                              e.layer_index(), epoch);
      }
      total += lg.loss * static_cast<double>(stop - start);
      seen += stop - start;
      if (!frozen) {
        update_running_stats(graph, out.weights, lg.acts);
        sgd_step(out.weights, lg.grads, velocity, sgd);
      }
    }
    out.loss_curve.push_back(total / static_cast<double>(seen));
  }
  return out;
}

// ---- evaluation ------------------------------------------------------------

ConfusionMatrix confusion_matrix(std::span<const int> predicted, std::span<const int> labels,
                                 std::size_t classes) {
  if (predicted.size() != labels.size()) {
    throw ShapeError("confusion matrix: " + std::to_string(predicted.size()) +
                     " predictions for " + std::to_string(labels.size()) + " labels");
  }
  ConfusionMatrix m(classes, std::vector<std::uint64_t>(classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int t = labels[i], p = predicted[i];
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= classes ||
        static_cast<std::size_t>(p) >= classes) {
      throw ShapeError("confusion matrix: class index out of range at row " + std::to_string(i));
    }
    ++m[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  return m;
}

EvalReport report_from_confusion(const ConfusionMatrix& m) {
  EvalReport r;
  r.confusion = m;
  const std::size_t k = m.size();
  std::uint64_t total = 0, correct = 0;
  std::vector<std::uint64_t> row(k, 0), col(k, 0);
  for (std::size_t t = 0; t < k; ++t) {
    for (std::size_t p = 0; p < k; ++p) {
      total += m[t][p];
      row[t] += m[t][p];
      col[p] += m[t][p];
    }
    correct += m[t][t];
  }
  const auto pct = [](std::uint64_t num, std::uint64_t den) {
    return den == 0 ? 0.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den);
  };
  r.accuracy = pct(correct, total);
  for (std::size_t c = 0; c < k; ++c) {
    const std::uint64_t tp = m[c][c];
    const std::uint64_t fp = col[c] - tp;
    const std::uint64_t fn = row[c] - tp;
    const std::uint64_t tn = total - tp - fp - fn;
    r.precision.push_back(pct(tp, tp + fp));
    r.recall.push_back(pct(tp, tp + fn));
    r.specificity.push_back(pct(tn, tn + fp));
  }
  if (k > 0) {
    const auto mean = [k](const std::vector<double>& v) {
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(k);
    };
    r.macro_precision = mean(r.precision);
    r.macro_recall = mean(r.recall);
    r.macro_specificity = mean(r.specificity);
  }
  return r;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), k = logits.size() / std::max<std::size_t>(1, n);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.data() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

std::vector<int> predict_labels(const ModelGraph& graph, const ModelWeights<float>& weights,
                                const Tensor& images, std::size_t batch_size) {
  const std::size_t n = images.dim(0);
  const std::size_t per = n == 0 ? 0 : images.size() / n;
  std::vector<int> out;
  out.reserve(n);
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t m = std::min(batch_size, n - start);
    Tensor x({m, images.dim(1), images.dim(2), images.dim(3)});
    std::copy(images.data() + start * per, images.data() + (start + m) * per, x.data());
    const auto p = argmax_rows(predict(graph, weights, x));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

EvalReport evaluate(const ModelGraph& graph, const ModelWeights<float>& weights,
                    const Dataset& data) {
  check_classes(graph, data);
  const auto pred = predict_labels(graph, weights, data.images);
  return report_from_confusion(confusion_matrix(pred, data.labels, data.num_classes()));
}

// ---- experiments -----------------------------------------------------------

MeanStd mean_std(std::span<const double> values) {
  MeanStd r;
  if (values.empty()) return r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(values.size()));
  return r;
}

double metric_value(const EvalReport& r, std::string_view metric) {
  if (metric == "accuracy") return r.accuracy;
  if (metric == "macro_precision") return r.macro_precision;
  if (metric == "macro_recall") return r.macro_recall;
  if (metric == "macro_specificity") return r.macro_specificity;
  throw ConfigError("unknown metric '" + std::string(metric) + "'");
}

ExperimentConfig experiment_from_config(const Config& cfg, const std::filesystem::path& base_dir) {
  ExperimentConfig e;
  static const std::string kTrainKeys[] = {"epochs", "batch_size", "lr",        "momentum",
                                           "weight_decay", "milestones", "lr_factor", "seed",
                                           "augment"};
  static const std::string kTop[] = {"dataset",        "dataset_dir", "architecture",
                                     "methods",        "rates",       "repetitions",
                                     "seed",           "fixed_seed",  "calibration_batch",
                                     "baseline_model", "tolerant"};
  for (const auto& [key, value] : cfg.entries()) {
    if (key.starts_with("data.")) {
      e.data.set(key.substr(5), value);
      continue;
    }
    if (key.starts_with("rate.")) continue;
    bool ok = std::find(std::begin(kTop), std::end(kTop), key) != std::end(kTop);
    for (const char* p : {"train.", "finetune."}) {
      if (key.starts_with(p)) {
        const std::string rest = key.substr(std::string_view(p).size());
        ok = ok || std::find(std::begin(kTrainKeys), std::end(kTrainKeys), rest) != std::end(kTrainKeys);
      }
    }
    if (!ok) throw ConfigError("unknown experiment config key '" + key + "'");
  }

  const auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  e.dataset = cfg.get_string("dataset", e.dataset);
  if (e.dataset != "synthetic" && e.dataset != "cifar10") {
    throw ConfigError("config key 'dataset': expected synthetic or cifar10, got '" + e.dataset + "'");
  }
  if (cfg.has("dataset_dir")) e.dataset_dir = resolve(cfg.get_string("dataset_dir"));
  e.architecture = cfg.get_string("architecture", e.architecture);
  if (cfg.has("methods")) {
    e.methods.clear();
    for (const auto& m : split_list(cfg.get_string("methods"))) {
      e.methods.push_back(rank_method_from_string(m));
    }
  }
  if (cfg.has("rates")) {
    e.rates = load_rates(resolve(cfg.get_string("rates")));
    e.rates_source = cfg.get_string("rates");
  }
  for (const auto& [key, value] : cfg.entries()) {
    if (key.starts_with("rate.")) {
      e.rates[key.substr(5)] = cfg.get_double(key);
      e.rates_source = e.rates_source.empty() ? "inline" : e.rates_source + "+inline";
    }
  }
  const auto reps = cfg.get_int("repetitions", static_cast<std::int64_t>(e.repetitions));
  if (reps < 1) throw ConfigError("config key 'repetitions': must be >= 1");
  e.repetitions = static_cast<std::size_t>(reps);
  e.seed = cfg.get_u64("seed", e.seed);
  e.fixed_seed = cfg.get_bool("fixed_seed", e.fixed_seed);
  const auto cb = cfg.get_int("calibration_batch", static_cast<std::int64_t>(e.calibration_batch));
  if (cb < 2) throw ConfigError("config key 'calibration_batch': must be >= 2");
  e.calibration_batch = static_cast<std::size_t>(cb);
  if (cfg.has("baseline_model")) e.baseline_model = resolve(cfg.get_string("baseline_model"));
  e.baseline_train = train_config_from(cfg, "train.");
  e.finetune = train_config_from(cfg, "finetune.");
  e.tolerant = cfg.get_bool("tolerant", e.tolerant);
  return e;
}

Config experiment_to_config(const ExperimentConfig& e) {
  Config c;
  c.set("dataset", e.dataset);
  if (!e.dataset_dir.empty()) c.set("dataset_dir", e.dataset_dir.string());
  for (const auto& [k, v] : e.data.entries()) c.set("data." + k, v);
  c.set("architecture", e.architecture);
  std::vector<std::string> ms;
  for (auto m : e.methods) ms.emplace_back(to_string(m));
  c.set("methods", join(ms));
  for (const auto& [id, pr] : e.rates) c.set("rate." + id, fmt_double(pr));
  c.set("repetitions", std::to_string(e.repetitions));
  c.set("seed", std::to_string(e.seed));
  c.set("fixed_seed", e.fixed_seed ? "true" : "false");
  c.set("calibration_batch", std::to_string(e.calibration_batch));
  if (e.baseline_model) c.set("baseline_model", e.baseline_model->string());
  write_train_config(c, e.baseline_train, "train.");
  write_train_config(c, e.finetune, "finetune.");
  c.set("tolerant", e.tolerant ? "true" : "false");
  return c;
}

std::uint64_t repetition_seed(const ExperimentConfig& e, std::size_t r) {
  return e.fixed_seed ? e.seed : mix_seed(e.seed, 7000 + r);
}

std::pair<Dataset, Dataset> load_experiment_data(const ExperimentConfig& e) {
  Config data = e.data;
  data.set("dataset", e.dataset);
  if (!e.dataset_dir.empty()) data.set("dataset_dir", e.dataset_dir.string());
  return load_datasets(data, ".", e.seed);
}

namespace {

struct RepetitionOutput {
  std::vector<MethodResult> methods;  // one run each
  std::vector<std::string> warnings;
};

RepetitionOutput run_repetition(const ExperimentConfig& e, const Dataset& train_set,
                                const Dataset& val_set, std::size_t rep) {
  RepetitionOutput out;
  const std::uint64_t seed = repetition_seed(e, rep);

  ModelGraph graph;
  ModelWeights<float> weights;
  if (e.baseline_model) {
    Model m = load_model(*e.baseline_model);
    graph = std::move(m.graph);
    weights = std::move(m.weights);
  } else {
    graph = build_architecture(e.architecture, train_set.sample_shape(), train_set.num_classes());
    weights = init_weights(graph, mix_seed(seed, 1));
  }
  if (e.baseline_train.epochs > 0) {
    TrainConfig tc = e.baseline_train;
    tc.seed = mix_seed(seed, 2);
    weights = train(graph, weights, train_set, tc).weights;
  }
  const FlopReport base = count_flops_params(graph);
  out.methods.push_back({"Baseline", base.total_flops, base.total_params,
                         {{rep, seed, evaluate(graph, weights, val_set)}}});

  const std::uint64_t calib_seed = mix_seed(seed, 3);
  const Batch calib = sample_batch(train_set, std::min(e.calibration_batch, train_set.size()), calib_seed);
  for (RankMethod method : e.methods) {
    const RankVector rank = rank_filters(method, graph, weights, calib.images, calib_seed);
    PruningPlan plan = select_top_filters(rank, e.rates);
    plan.method = method;
    PrunedModel pm = construct_pruned(graph, weights, plan, {e.tolerant});
    for (auto& w : pm.warnings) out.warnings.push_back(std::move(w));
    TrainConfig ft = e.finetune;
    ft.seed = mix_seed(seed, 4);
    ModelWeights<float> tuned =
        ft.epochs > 0 ? train(pm.graph, pm.weights, train_set, ft).weights : pm.weights;
    out.methods.push_back({std::string(to_string(method)), pm.report.total_flops,
                           pm.report.total_params,
                           {{rep, seed, evaluate(pm.graph, tuned, val_set)}}});
  }
  return out;
}

[[noreturn]] void rethrow_tagged(std::exception_ptr ep, std::size_t rep) {
  const std::string tag = "repetition " + std::to_string(rep) + ": ";
  try {
    std::rethrow_exception(ep);
  } catch (const DivergenceError& e) {
    throw DivergenceError(tag + e.what(), e.layer_index(), e.epoch());
  } catch (const NumericError& e) {
    throw NumericError(tag + e.what(), e.layer_index());
  } catch (const ConfigError& e) {
    throw ConfigError(tag + e.what());
  } catch (const FormatError& e) {
    throw FormatError(tag + e.what());
  } catch (const FileNotFoundError& e) {
    throw FileNotFoundError(tag + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(tag + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(tag + e.what());
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& e, std::size_t jobs) {
  if (e.repetitions < 1) throw ConfigError("an experiment needs at least one repetition");
  if (e.rates.empty()) throw ConfigError("experiment has no pruning rates");
  const auto [train_set, val_set] = load_experiment_data(e);

  std::vector<RepetitionOutput> outs(e.repetitions);
  std::vector<std::exception_ptr> errors(e.repetitions);
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t r; (r = next++) < e.repetitions;) {
      try {
        outs[r] = run_repetition(e, train_set, val_set, r);
      } catch (...) {
        errors[r] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, e.repetitions);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t r = 0; r < e.repetitions; ++r) {
    if (errors[r]) rethrow_tagged(errors[r], r);
  }

  ExperimentResult result;
  for (std::size_t r = 0; r < e.repetitions; ++r) {
    for (std::size_t m = 0; m < outs[r].methods.size(); ++m) {
      if (r == 0) {
        result.methods.push_back(outs[r].methods[m]);
      } else {
        result.methods[m].runs.push_back(outs[r].methods[m].runs.front());
      }
    }
    for (auto& w : outs[r].warnings) {
      if (std::find(result.warnings.begin(), result.warnings.end(), w) == result.warnings.end()) {
        result.warnings.push_back(w);
      }
    }
  }
  return result;
}

void write_aggregate_csv(std::ostream& os, const ExperimentResult& r) {
  os << "method,flops,params,metric,mean,std\n";
  char buf[64];
  for (const auto& m : r.methods) {
    for (const char* metric : kMetricNames) {
      std::vector<double> v;
      for (const auto& run : m.runs) v.push_back(metric_value(run.report, metric));
      const MeanStd ms = mean_std(v);
      std::snprintf(buf, sizeof buf, "%.4f,%.4f", ms.mean, ms.std);
      os << m.method << ',' << m.flops << ',' << m.params << ',' << metric << ',' << buf << '\n';
    }
  }
}

void write_repetition_csv(std::ostream& os, const ExperimentResult& r) {
  os << "method,repetition,seed";
  for (const char* metric : kMetricNames) os << ',' << metric;
  os << '\n';
  char buf[32];
  for (const auto& m : r.methods) {
    for (const auto& run : m.runs) {
      os << m.method << ',' << run.repetition << ',' << run.seed;
      for (const char* metric : kMetricNames) {
        std::snprintf(buf, sizeof buf, "%.4f", metric_value(run.report, metric));
        os << ',' << buf;
      }
      os << '\n';
    }
  }
}

}  // namespace fprune
