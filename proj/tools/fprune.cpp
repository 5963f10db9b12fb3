// fprune: stage-by-stage command line for filter ranking, pruning and fine-tuning.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "fprune/analysis.hpp"
#include "fprune/config.hpp"
#include "fprune/dataio.hpp"
#include "fprune/flops.hpp"
#include "fprune/model_io.hpp"
#include "fprune/pruning.hpp"
#include "fprune/ranking.hpp"
#include "fprune/rng.hpp"
#include "fprune/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace fprune;

namespace {

constexpr const char* kVersion = "1.0.0";

enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kMissingFile = 3,
  kConfig = 4,
  kFormat = 5,
  kShape = 6,
  kNumeric = 7,
};

constexpr const char* kExitHelp =
    "Exit codes:\n"
    "  0  success\n"
    "  1  internal error\n"
    "  2  usage error (unknown flag, bad flag value)\n"
    "  3  missing input file\n"
    "  4  configuration error (bad config file or parameter)\n"
    "  5  malformed input file\n"
    "  6  shape mismatch between model and data\n"
    "  7  numeric failure (training diverged)\n"
    "Errors print one line to stderr: error kind=<kind> exit=<code> message=<text>\n";

std::uint64_t fnv1a(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// One invocation: resolved parameters, files read and written.
struct Run {
  std::string command;
  std::vector<std::string> argv;
  fs::path out = ".";
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  json params = json::object();
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;

  void input(const fs::path& p) {
    if (!fs::exists(p)) throw FileNotFoundError("file not found: " + p.string());
    inputs.push_back(p);
  }

  fs::path output(const std::string& name) {
    const fs::path p = out / name;
    for (const auto& in : inputs) {
      if (fs::weakly_canonical(in) == fs::weakly_canonical(p)) {
        throw ConfigError("refusing to overwrite input file " + in.string());
      }
    }
    outputs.push_back(p);
    return p;
  }

  void write(const std::string& name, const std::function<void(std::ostream&)>& body) {
    const fs::path p = output(name);
    std::ofstream os(p, std::ios::binary);
    if (!os) throw FileNotFoundError("cannot write " + p.string());
    body(os);
  }

  Model load(const fs::path& stem) {
    const ModelFiles f = model_files(stem);
    input(f.manifest);
    input(f.blob);
    return load_model(stem);
  }

  void save(const std::string& stem, const ModelGraph& g, const ModelWeights<float>& w) {
    const ModelFiles f = model_files(out / stem);
    output(f.manifest.filename().string());
    output(f.blob.filename().string());
    save_model(g, w, out / stem);
  }

  std::pair<Dataset, Dataset> data(const fs::path& cfg_path) {
    input(cfg_path);
    const Config cfg = Config::load(cfg_path);
    params["data_config"] = cfg.to_text();
    return load_datasets(cfg, cfg_path.parent_path(), seed);
  }

  void write_manifest() {
    json m;
    m["tool"] = "fprune";
    m["version"] = kVersion;
    m["command"] = command;
    m["argv"] = argv;
    m["seed"] = seed;
    m["jobs"] = jobs;
    m["params"] = params;
    const auto files = [](const std::vector<fs::path>& ps) {
      json a = json::array();
      for (const auto& p : ps) {
        json e;
        e["path"] = p.string();
        e["bytes"] = fs::exists(p) ? fs::file_size(p) : 0;
        e["fnv1a64"] = fs::exists(p) ? hex(fnv1a(p)) : "";
        a.push_back(e);
      }
      return a;
    };
    m["inputs"] = files(inputs);
    m["outputs"] = files(outputs);
    std::ofstream os(out / (command + ".manifest.json"));
    os << m.dump(2) << '\n';
  }
};

TrainConfig train_config(Run& run, const std::string& path) {
  TrainConfig t;
  if (!path.empty()) {
    run.input(path);
    const Config c = Config::load(path);
    c.require_known({"epochs", "batch_size", "lr", "momentum", "weight_decay", "milestones",
                     "lr_factor", "seed", "augment"});
    t = train_config_from(c);
  }
  t.seed = mix_seed(run.seed, 2);
  Config resolved;
  write_train_config(resolved, t);
  run.params["train"] = resolved.to_text();
  return t;
}

void write_loss_csv(std::ostream& os, const TrainResult& r, const TrainConfig& t) {
  os << "epoch,loss,lr\n";
  char buf[96];
  for (std::size_t e = 0; e < r.loss_curve.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", e + 1, r.loss_curve[e], lr_at(t, e));
    os << buf;
  }
}

void write_eval_csv(std::ostream& os, const EvalReport& r) {
  os << "metric,value\n";
  char buf[64];
  for (const char* m : kMetricNames) {
    std::snprintf(buf, sizeof buf, "%s,%.4f\n", m, metric_value(r, m));
    os << buf;
  }
}

void write_confusion_csv(std::ostream& os, const EvalReport& r) {
  os << "true\\predicted";
  for (std::size_t c = 0; c < r.confusion.size(); ++c) os << ',' << c;
  os << '\n';
  for (std::size_t t = 0; t < r.confusion.size(); ++t) {
    os << t;
    for (auto v : r.confusion[t]) os << ',' << v;
    os << '\n';
  }
}

SampleShape parse_shape(const std::string& s) {
  SampleShape out;
  for (const auto& p : split_list(s)) {
    std::size_t v = 0;
    try {
      v = std::stoul(p);
    } catch (const std::exception&) {
      throw ConfigError("bad input shape '" + s + "'");
    }
    out.push_back(v);
  }
  if (out.size() != 3) throw ConfigError("input shape needs three values C,H,W, got '" + s + "'");
  return out;
}

// ---- subcommands -------------------------------------------------------------

struct Opts {
  std::string arch, input_shape = "3,32,32", model, rates, data, train, method = "beta", rank,
              config, baseline, dataset_name = "synthetic", split = "validation";
  std::size_t classes = 10, batch = 64, repetitions = 3, bench_repetitions = 5, warmup = 2, index = 0;
  double q = 0.25;
  int target = -1;
  bool strict = false;
};

void cmd_flops(Run& run, const Opts& o) {
  ModelGraph g;
  if (!o.model.empty()) {
    g = run.load(o.model).graph;
  } else {
    if (o.arch.empty()) throw ConfigError("flops needs --arch or --model");
    g = build_architecture(o.arch, parse_shape(o.input_shape), o.classes);
  }
  run.params["architecture"] = g.family();
  FlopReport rep = count_flops_params(g);
  run.write("flops.csv", [&](std::ostream& os) { write_flop_csv(os, rep); });
  std::printf("%s flops %llu (%.2fM) params %llu (%.2fM)\n", g.family().c_str(),
              static_cast<unsigned long long>(rep.total_flops), rep.mflops(),
              static_cast<unsigned long long>(rep.total_params), rep.mparams());
  if (!o.rates.empty()) {
    run.input(o.rates);
    run.params["rates"] = o.rates;
    PruningPlan plan;
    plan.rates = load_rates(o.rates);
    for (const auto& [id, pr] : plan.rates) {
      const auto idx = g.find(id);
      if (!idx) throw ConfigError("rate for unknown layer '" + id + "'");
      const std::size_t k = g.node(*idx).conv.out_channels;
      for (std::size_t i = 0; i < keep_count(k, pr); ++i) plan.kept[id].push_back(i);
    }
    std::vector<std::string> warnings;
    FlopReport pruned = count_flops_params(
        prune_graph(g, effective_plan(g, plan, {!o.strict}, &warnings)));
    for (const auto& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
    set_reduction(pruned, rep);
    run.write("flops_pruned.csv", [&](std::ostream& os) { write_flop_csv(os, pruned); });
    std::printf("pruned flops %llu (%.2fM, -%.2f%%) params %llu (%.2fM, -%.2f%%)\n",
                static_cast<unsigned long long>(pruned.total_flops), pruned.mflops(),
                *pruned.flop_reduction_pct, static_cast<unsigned long long>(pruned.total_params),
                pruned.mparams(), *pruned.param_reduction_pct);
  }
}

void cmd_train_baseline(Run& run, const Opts& o) {
  if (o.arch.empty()) throw ConfigError("train-baseline needs --arch");
  const auto [train_set, val_set] = run.data(o.data);
  const TrainConfig t = train_config(run, o.train);
  const ModelGraph g = build_architecture(o.arch, train_set.sample_shape(), train_set.num_classes());
  run.params["architecture"] = o.arch;
  const TrainResult r = train(g, init_weights(g, mix_seed(run.seed, 1)), train_set, t);
  run.save("model", g, r.weights);
  run.write("loss.csv", [&](std::ostream& os) { write_loss_csv(os, r, t); });
  std::printf("trained %s for %zu epochs, final loss %.4f\n", o.arch.c_str(), t.epochs,
              r.loss_curve.back());
}

void cmd_rank(Run& run, const Opts& o) {
  const Model m = run.load(o.model);
  const RankMethod method = rank_method_from_string(o.method);
  run.params["method"] = std::string(to_string(method));
  Tensor batch;
  if (method != RankMethod::L1) {
    const auto [train_set, val_set] = run.data(o.data);
    batch = sample_batch(train_set, o.batch, run.seed).images;
    run.params["calibration_batch"] = o.batch;
  }
  const RankVector r = rank_filters(method, m.graph, m.weights, batch, run.seed);
  run.write("rank.csv", [&](std::ostream& os) { write_rank_csv(os, r); });
  std::printf("ranked %zu conv layers with %s\n", r.layers.size(), run.params["method"].get<std::string>().c_str());
}

void cmd_prune(Run& run, const Opts& o) {
  const Model m = run.load(o.model);
  run.input(o.rank);
  run.input(o.rates);
  std::ifstream rank_in(o.rank);
  const RankVector rank = read_rank_csv(rank_in);
  PruningPlan plan = select_top_filters(rank, load_rates(o.rates));
  plan.method = rank.method;
  run.params["method"] = std::string(to_string(rank.method));
  run.params["strict"] = o.strict;
  const PrunedModel p = construct_pruned(m.graph, m.weights, plan, {!o.strict});
  for (const auto& w : p.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  run.save("model", p.graph, p.weights);
  run.write("plan.txt", [&](std::ostream& os) { write_plan(os, p.plan); });
  run.write("flops.csv", [&](std::ostream& os) { write_flop_csv(os, p.report); });
  std::printf("pruned: flops %.2fM (-%.2f%%) params %.2fM (-%.2f%%)\n", p.report.mflops(),
              *p.report.flop_reduction_pct, p.report.mparams(), *p.report.param_reduction_pct);
}

void cmd_finetune(Run& run, const Opts& o) {
  const Model m = run.load(o.model);
  const auto [train_set, val_set] = run.data(o.data);
  const TrainConfig t = train_config(run, o.train);
  const TrainResult r = train(m.graph, m.weights, train_set, t);
  run.save("model", m.graph, r.weights);
  run.write("loss.csv", [&](std::ostream& os) { write_loss_csv(os, r, t); });
  std::printf("fine-tuned for %zu epochs, final loss %.4f\n", t.epochs, r.loss_curve.back());
}

const Dataset& pick_split(const std::pair<Dataset, Dataset>& d, const std::string& split) {
  if (split == "validation") return d.second;
  if (split == "train") return d.first;
  throw ConfigError("--split must be train or validation, got '" + split + "'");
}

void cmd_eval(Run& run, const Opts& o) {
  const Model m = run.load(o.model);
  const auto data = run.data(o.data);
  run.params["split"] = o.split;
  const EvalReport r = evaluate(m.graph, m.weights, pick_split(data, o.split));
  run.write("eval.csv", [&](std::ostream& os) { write_eval_csv(os, r); });
  run.write("confusion.csv", [&](std::ostream& os) { write_confusion_csv(os, r); });
  std::printf("accuracy %.2f macro_precision %.2f macro_recall %.2f macro_specificity %.2f\n",
              r.accuracy, r.macro_precision, r.macro_recall, r.macro_specificity);
}

void cmd_stability(Run& run, const Opts& o) {
  const Model m = run.load(o.model);
  const auto [train_set, val_set] = run.data(o.data);
  const RankMethod method = rank_method_from_string(o.method);
  std::vector<std::uint64_t> seeds;
  for (std::size_t r = 0; r < o.repetitions; ++r) seeds.push_back(mix_seed(run.seed, 100 + r));
  run.params["method"] = std::string(to_string(method));
  run.params["repetitions"] = o.repetitions;
  run.params["q"] = o.q;
  run.params["calibration_batch"] = o.batch;
  run.params["batch_seeds"] = seeds;
  const StabilityReport r =
      stability_fraction(m.graph, m.weights, method, train_set, o.q, seeds, o.batch, run.jobs);
  for (const auto& w : r.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  run.write("stability.csv", [&](std::ostream& os) { write_stability_csv(os, r); });
  double top = 0, least = 0;
  for (const auto& l : r.layers) {
    top += l.top_fraction;
    least += l.least_fraction;
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, r.layers.size()));
  std::printf("%s stability over %zu layers: mean top %.4f mean least %.4f\n",
              run.params["method"].get<std::string>().c_str(), r.layers.size(), top / n, least / n);
}

void cmd_gradcam(Run& run, const Opts& o) {
  const Model m = run.load(o.model);
  const auto data = run.data(o.data);
  const Dataset& d = pick_split(data, o.split);
  if (o.index >= d.size()) {
    throw ConfigError("--index " + std::to_string(o.index) + " out of range for " +
                      std::to_string(d.size()) + " samples");
  }
  const std::size_t idx = o.index;
  const Batch b = gather(d, std::span<const std::size_t>(&idx, 1));
  const int target = o.target >= 0 ? o.target : b.labels[0];
  run.params["split"] = o.split;
  run.params["index"] = o.index;
  run.params["target_class"] = target;
  const GradCamMap g = gradcam(m.graph, m.weights, b.images, target);
  const std::string stem = gradcam_stem(g);
  run.write(stem + ".pgm", [&](std::ostream& os) { write_pgm(os, g); });
  run.write(stem + ".csv", [&](std::ostream& os) { write_heatmap_csv(os, g); });
  std::printf("grad-cam on %s, class %d, probability %.4f -> %s.pgm\n", g.layer_id.c_str(), target,
              g.probability, stem.c_str());
}

void cmd_bench(Run& run, const Opts& o) {
  run.params["repetitions"] = o.bench_repetitions;
  run.params["warmup"] = o.warmup;
  run.params["dataset"] = o.dataset_name;
  std::vector<BenchReport> reports;
  if (!o.baseline.empty()) {
    run.load(o.baseline);
    reports.push_back(bench_file(o.baseline, o.bench_repetitions, o.warmup, run.seed));
  }
  run.load(o.model);
  reports.push_back(bench_file(o.model, o.bench_repetitions, o.warmup, run.seed));
  if (reports.size() == 2) set_bench_reduction(reports[1], reports[0]);
  for (auto& r : reports) {
    r.dataset = o.dataset_name;
    std::printf("%s: %.3f +- %.3f ms, %.3f MB", r.model.c_str(), r.time_mean, r.time_std, r.mem_mean);
    if (r.time_reduction_pct) {
      std::printf(" (time -%.1f%%, memory -%.1f%%)", *r.time_reduction_pct, *r.mem_reduction_pct);
    }
    std::printf("\n");
  }
  run.write("bench.csv", [&](std::ostream& os) { write_bench_csv(os, reports); });
}

void cmd_experiment(Run& run, const Opts& o, bool seed_given) {
  run.input(o.config);
  Config cfg = Config::load(o.config);
  if (seed_given) cfg.set("seed", std::to_string(run.seed));
  const ExperimentConfig e = experiment_from_config(cfg, fs::path(o.config).parent_path());
  if (e.baseline_model) {
    const ModelFiles f = model_files(*e.baseline_model);
    run.input(f.manifest);
    run.input(f.blob);
  }
  run.seed = e.seed;
  run.params["experiment"] = experiment_to_config(e).to_text();
  const ExperimentResult r = run_experiment(e, run.jobs);
  for (const auto& w : r.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  run.write("aggregate.csv", [&](std::ostream& os) { write_aggregate_csv(os, r); });
  run.write("repetitions.csv", [&](std::ostream& os) { write_repetition_csv(os, r); });
  run.write("experiment.resolved.conf", [&](std::ostream& os) { os << experiment_to_config(e).to_text(); });
  for (const auto& m : r.methods) {
    std::vector<double> acc, rec;
    for (const auto& run_r : m.runs) {
      acc.push_back(run_r.report.accuracy);
      rec.push_back(run_r.report.macro_recall);
    }
    const MeanStd a = mean_std(acc), c = mean_std(rec);
    std::printf("%-8s flops %.2fM params %.3fM accuracy %.2f +- %.2f macro_recall %.2f +- %.2f\n",
                m.method.c_str(), static_cast<double>(m.flops) / 1e6,
                static_cast<double>(m.params) / 1e6, a.mean, a.std, c.mean, c.std);
  }
}

int fail(const char* kind, int code, const std::string& message) {
  std::string one_line = message;
  for (char& ch : one_line) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  std::fprintf(stderr, "error kind=%s exit=%d message=%s\n", kind, code, one_line.c_str());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fprune: rank, prune, fine-tune and evaluate convolutional networks"};
  app.footer(kExitHelp);
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Run run;
  Opts o;
  std::string out = ".";
  app.add_option("--seed", run.seed, "Seed for every random choice")->default_val(0);
  app.add_option("--out,-o", out, "Output directory")->default_val(".");
  app.add_option("--jobs,-j", run.jobs, "Threads for independent repetitions")->default_val(1);
  app.fallthrough();

  const auto model_opt = [&](CLI::App* c) {
    return c->add_option("--model,-m", o.model, "Model stem or .manifest path")->required();
  };
  const auto data_opt = [&](CLI::App* c) {
    return c->add_option("--data,-d", o.data, "Data config file")->required();
  };

  auto* flops = app.add_subcommand("flops", "FLOP and parameter counts");
  flops->add_option("--arch", o.arch, "Built-in family, e.g. resnet56, vgg16-cifar, resnet20:w2");
  flops->add_option("--model,-m", o.model, "Saved model instead of --arch");
  flops->add_option("--input", o.input_shape, "Input shape C,H,W")->capture_default_str();
  flops->add_option("--classes", o.classes, "Number of classes")->capture_default_str();
  flops->add_option("--rates", o.rates, "PR preset; also report the pruned counts");
  flops->add_flag("--strict", o.strict, "Reject rates on residual-feeding layers");

  auto* tb = app.add_subcommand("train-baseline", "Train a model from scratch");
  tb->add_option("--arch", o.arch, "Built-in family")->required();
  data_opt(tb);
  tb->add_option("--train,-t", o.train, "Train config file");

  auto* rank = app.add_subcommand("rank", "Score every filter of every conv layer");
  model_opt(rank);
  rank->add_option("--method", o.method, "l1, beta or hrank")->capture_default_str();
  rank->add_option("--data,-d", o.data, "Data config (calibration batch; not needed for l1)");
  rank->add_option("--batch", o.batch, "Calibration batch size")->capture_default_str();

  auto* prune = app.add_subcommand("prune", "Remove the lowest-ranked filters");
  model_opt(prune);
  prune->add_option("--rank", o.rank, "Rank CSV from `rank`")->required();
  prune->add_option("--rates", o.rates, "PR preset (layer = rate)")->required();
  prune->add_flag("--strict", o.strict, "Reject rates on residual-feeding layers");

  auto* ft = app.add_subcommand("finetune", "Continue training a (pruned) model");
  model_opt(ft);
  data_opt(ft);
  ft->add_option("--train,-t", o.train, "Train config file");

  auto* ev = app.add_subcommand("eval", "Confusion matrix and macro metrics");
  model_opt(ev);
  data_opt(ev);
  ev->add_option("--split", o.split, "train or validation")->capture_default_str();

  auto* st = app.add_subcommand("stability", "Top/least selection stability over re-rankings");
  model_opt(st);
  data_opt(st);
  st->add_option("--method", o.method, "l1, beta or hrank")->capture_default_str();
  st->add_option("--repetitions,-r", o.repetitions, "Number of calibration batches")->capture_default_str();
  st->add_option("--q", o.q, "Selected fraction per layer")->capture_default_str();
  st->add_option("--batch", o.batch, "Calibration batch size")->capture_default_str();

  auto* gc = app.add_subcommand("gradcam", "Grad-CAM heatmap of one sample");
  model_opt(gc);
  data_opt(gc);
  gc->add_option("--index", o.index, "Sample index")->capture_default_str();
  gc->add_option("--class", o.target, "Target class (default: the sample's label)");
  gc->add_option("--split", o.split, "train or validation")->capture_default_str();

  auto* be = app.add_subcommand("bench", "Single-image latency and memory");
  model_opt(be);
  be->add_option("--baseline", o.baseline, "Reference model for reduction percentages");
  be->add_option("--repetitions,-r", o.bench_repetitions, "Timed runs")->capture_default_str();
  be->add_option("--warmup", o.warmup, "Untimed runs first")->capture_default_str();
  be->add_option("--dataset-name", o.dataset_name, "Label for the CSV")->capture_default_str();

  auto* ex = app.add_subcommand("experiment", "Repeated rank-prune-finetune-eval for several methods");
  ex->add_option("--config,-c", o.config, "Experiment config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", kUsage, e.what());
  }

  for (int i = 0; i < argc; ++i) run.argv.emplace_back(argv[i]);
  run.out = out;
  try {
    fs::create_directories(run.out);
    CLI::App* sub = app.get_subcommands().front();
    run.command = sub->get_name();
    if (sub == flops) cmd_flops(run, o);
    else if (sub == tb) cmd_train_baseline(run, o);
    else if (sub == rank) cmd_rank(run, o);
    else if (sub == prune) cmd_prune(run, o);
    else if (sub == ft) cmd_finetune(run, o);
    else if (sub == ev) cmd_eval(run, o);
    else if (sub == st) cmd_stability(run, o);
    else if (sub == gc) cmd_gradcam(run, o);
    else if (sub == be) cmd_bench(run, o);
    else if (sub == ex) cmd_experiment(run, o, app.count("--seed") > 0);
    run.write_manifest();
  } catch (const FileNotFoundError& e) {
    return fail("missing_file", kMissingFile, e.what());
  } catch (const ConfigError& e) {
    return fail("config", kConfig, e.what());
  } catch (const FormatError& e) {
    return fail("format", kFormat, e.what());
  } catch (const ShapeError& e) {
    return fail("shape", kShape, e.what());
  } catch (const NumericError& e) {
    return fail("numeric", kNumeric, e.what());
  } catch (const std::exception& e) {
    return fail("internal", kInternal, e.what());
  }
  return kOk;
}
