#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fprune/model_io.hpp"
#include "fprune/pruning.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fprune;
using namespace fprune::testing;

namespace {

RankVector scores_of(std::vector<double> s, const std::string& id = "c") {
  RankVector r;
  r.layers.push_back({id, std::move(s)});
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("keep counts and top-filter selection") {
  CHECK(keep_count(10, 0.33) == 7);
  CHECK(keep_count(16, 0.25) == 12);
  CHECK(keep_count(3, 0.99) == 1);
  CHECK(keep_count(1, 0.9) == 1);

  std::vector<double> s(16);
  for (std::size_t i = 0; i < 16; ++i) s[i] = static_cast<double>(i + 1);
  auto plan = select_top_filters(scores_of(s), {{"c", 0.25}});
  std::vector<std::size_t> expect;
  for (std::size_t i = 4; i < 16; ++i) expect.push_back(i);
  CHECK(plan.kept["c"] == expect);

  plan = select_top_filters(scores_of(std::vector<double>(8, 1.0)), {{"c", 0.5}});
  CHECK(plan.kept["c"] == std::vector<std::size_t>{0, 1, 2, 3});

  // unrated layers keep everything
  plan = select_top_filters(scores_of({3, 1, 2}), {});
  CHECK(plan.kept["c"] == std::vector<std::size_t>{0, 1, 2});

  CHECK_THROWS_AS(select_top_filters(scores_of({1, 2}), {{"c", 0.0}}), ConfigError);
  CHECK_THROWS_AS(select_top_filters(scores_of({1, 2}), {{"c", 1.0}}), ConfigError);
  CHECK_THROWS_AS(select_top_filters(scores_of({1, 2}), {{"nope", 0.5}}), ConfigError);
}

TEST_CASE("property: kept sets are nested as the rate grows") {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(1 + rng.below(40));
    for (auto& v : s) v = static_cast<double>(rng.below(6));  // plenty of ties
    std::vector<std::size_t> prev;
    bool first = true;
    for (double pr = 0.05; pr < 1.0; pr += 0.05) {
      auto kept = select_top_filters(scores_of(s), {{"c", pr}}).kept["c"];
      REQUIRE(!kept.empty());
      REQUIRE(std::is_sorted(kept.begin(), kept.end()));
      if (!first) CHECK(std::includes(prev.begin(), prev.end(), kept.begin(), kept.end()));
      prev = kept;
      first = false;
    }
  }
}

TEST_CASE("protected residual layers") {
  const auto r = toy_resnet();
  CHECK(protected_layers(r) == std::vector<std::string>{"stem", "a_conv2", "b_conv2"});
  CHECK(prunable_layers(r) == std::vector<std::string>{"a_conv1", "b_conv1"});
  const auto r56 = build_architecture("resnet56", {3, 32, 32}, 10);
  CHECK(protected_layers(r56).size() == 28);
  CHECK(prunable_layers(r56).size() == 27);
  CHECK(prunable_layers(build_architecture("vgg16-cifar", {3, 32, 32}, 10)).size() == 13);

  Rng rng(2);
  const auto w = random_weights(r, rng);
  PruningPlan plan;
  plan.kept["a_conv2"] = {0, 1};
  CHECK_THROWS_AS(construct_pruned(r, w, plan, {false}), ConfigError);
  const auto m = construct_pruned(r, w, plan, {true});
  CHECK(m.warnings.size() == 1);
  CHECK(m.graph == r);
}

TEST_CASE("identity plans") {
  Rng rng(3);
  const auto dir = std::filesystem::temp_directory_path() / "fprune_test_identity";
  std::filesystem::create_directories(dir);
  for (const ModelGraph& g : {toy_vgg(), toy_resnet()}) {
    const auto w = random_weights(g, rng);
    // rates that round to zero removals
    const auto plan = select_top_filters(l1_rank(g, w), uniform_rates(g, 0.1));
    const auto m = construct_pruned(g, w, plan);
    CHECK(m.graph == g);
    CHECK(bitwise_equal(m.weights, w));
    CHECK(m.report.total_flops == m.baseline.total_flops);
    CHECK(*m.report.flop_reduction_pct == 0.0);
    save_model(g, w, dir / "a");
    save_model(m.graph, m.weights, dir / "b");
    CHECK(slurp(dir / "a.weights") == slurp(dir / "b.weights"));
  }
}

TEST_CASE("removing an all-zero filter leaves logits unchanged") {
  Rng rng(4);
  const auto g = plain_vgg();
  auto w = random_weights(g, rng);
  Tensor& f = w["c1"].weight;
  const std::size_t per = f.size() / 5;
  for (std::size_t e = 0; e < per; ++e) f[2 * per + e] = 0.0f;
  w["c1"].bias[2] = 0.0f;
  PruningPlan plan;
  plan.kept["c1"] = {0, 1, 3, 4};
  const auto m = construct_pruned(g, w, plan);
  CHECK(m.graph.node(0).conv.out_channels == 4);
  CHECK(m.graph.node(2).conv.in_channels == 4);
  const Tensor x = random_tensor({3, 3, 6, 6}, rng);
  CHECK(max_rel_err(predict(m.graph, m.weights, x), predict(g, w, x), 1e-3) < 1e-5);
}

TEST_CASE("transfer keeps the exact slice") {
  Rng rng(5);
  const auto g = plain_vgg();
  const auto w = random_weights(g, rng);
  PruningPlan plan;
  plan.kept["c2"] = {3};
  const auto m = construct_pruned(g, w, plan);
  const Tensor& a = w.at("c2").weight;
  const Tensor& b = m.weights.at("c2").weight;
  REQUIRE(b.shape() == Shape{1, 5, 3, 3});
  CHECK(std::equal(b.data(), b.data() + b.size(), a.data() + 3 * 45));
  CHECK(m.weights.at("c2").bias[0] == w.at("c2").bias[3]);
  // dense columns of channel 3 (9 positions each) survive
  CHECK(m.weights.at("fc").weight.shape() == Shape{3, 9});
  CHECK(m.weights.at("fc").weight[9 + 4] == w.at("fc").weight[36 + 3 * 9 + 4]);
}

TEST_CASE("property: surgery equals the channel-masking oracle") {
  Rng rng(6);
  std::vector<ModelGraph> graphs = {toy_vgg(), toy_resnet(), plain_vgg(),
                                    build_architecture("resnet8", {3, 8, 8}, 4),
                                    build_architecture("vgg16-cifar:w16", {3, 16, 16}, 3)};
  double worst = 0.0;
  int applied = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const ModelGraph& g = graphs[static_cast<std::size_t>(trial) % graphs.size()];
    const auto w = random_weights(g, rng);
    const auto plan = random_plan(g, rng);
    const auto m = construct_pruned(g, w, plan, {false});
    const auto masked = oracle::mask_pruned(g, w, m.plan.kept);
    const auto& is = g.input_shape();
    const Tensor x = random_tensor({3, is[0], is[1], is[2]}, rng);
    // 64-bit evaluation keeps accumulation-order rounding out of the comparison
    const auto xd = x.cast<double>();
    const auto got = predict(m.graph, cast_weights<double>(m.weights), xd);
    const auto ref = predict(g, cast_weights<double>(masked), xd);
    for (std::size_t i = 0; i < got.size(); ++i) {
      worst = std::max(worst, std::abs(double(got[i]) - ref[i]) / std::max(1.0, std::abs(double(ref[i]))));
    }
    CHECK(oracle::index_map_mismatches(g, w, m.weights, m.plan.kept) == 0);
    applied += m.report.total_params < m.baseline.total_params;
  }
  CHECK(worst < 1e-5);
  CHECK(applied > 20);
}

TEST_CASE("property: removing any filter strictly lowers params and FLOPs") {
  Rng rng(7);
  for (const ModelGraph& g : {toy_vgg(), toy_resnet(), build_architecture("resnet14", {3, 8, 8}, 4)}) {
    const auto w = random_weights(g, rng);
    const auto base = count_flops_params(g);
    for (const auto& id : prunable_layers(g)) {
      const std::size_t K = g.node(g.index_of(id)).conv.out_channels;
      PruningPlan plan;
      for (std::size_t k = 0; k + 1 < K; ++k) plan.kept[id].push_back(k);
      const auto m = construct_pruned(g, w, plan);
      CHECK(m.report.total_params < base.total_params);
      CHECK(m.report.total_flops < base.total_flops);
      CHECK(m.report.total_params == trainable_param_count(m.weights));
    }
  }
}

TEST_CASE("plan and preset text forms") {
  Rng rng(8);
  const auto g = toy_resnet();
  const auto w = random_weights(g, rng);
  auto plan = select_top_filters(l1_rank(g, w), {{"a_conv1", 0.4}, {"b_conv1", 1.0 / 3.0}});
  std::stringstream ss;
  write_plan(ss, plan);
  CHECK(ss.str().find("a_conv1 0.4 ") != std::string::npos);
  CHECK(read_plan(ss) == plan);

  const auto rates = rates_from_config(Config::parse("# preset\na_conv1 = 0.5\nb_conv1 = 0.25\n"));
  CHECK(rates.at("a_conv1") == 0.5);
  CHECK(rates.size() == 2);
  std::stringstream bad("a_conv1 x 0,1\n");
  CHECK_THROWS_AS(read_plan(bad), FormatError);
}

TEST_CASE("shipped presets hit their reduction targets") {
  struct Case {
    const char* file;
    const char* family;
    double params, flops;
  };
  const Case cases[] = {
      {"vgg16-cifar_p81_f58.conf", "vgg16-cifar", 81, 58},
      {"resnet56_p22_f27.conf", "resnet56", 22, 27},
      {"resnet56_p35_f41.conf", "resnet56", 35, 41},
      {"resnet110_p39_f45.conf", "resnet110", 39, 45},
      {"resnet110_p23_f27.conf", "resnet110", 23, 27},
      {"resnet20_f40.conf", "resnet20:w2", 35, 40},
  };
  const std::filesystem::path dir = std::filesystem::path(FPRUNE_SOURCE_DIR) / "configs" / "presets";
  for (const auto& c : cases) {
    CAPTURE(c.file);
    const auto g = build_architecture(c.family, {3, 32, 32}, 10);
    const auto rates = load_rates(dir / c.file);
    for (const auto& [id, pr] : rates) CHECK(g.find(id).has_value());
    // filter identity is irrelevant for the counts
    PruningPlan plan;
    plan.rates = rates;
    for (const auto& [id, pr] : rates) {
      const std::size_t K = g.node(g.index_of(id)).conv.out_channels;
      for (std::size_t k = 0; k < keep_count(K, pr); ++k) plan.kept[id].push_back(k);
    }
    auto rep = count_flops_params(prune_graph(g, effective_plan(g, plan, {false}, nullptr)));
    set_reduction(rep, count_flops_params(g));
    CHECK(std::abs(*rep.param_reduction_pct - c.params) <= 2.0);
    CHECK(std::abs(*rep.flop_reduction_pct - c.flops) <= 2.0);
  }
}
