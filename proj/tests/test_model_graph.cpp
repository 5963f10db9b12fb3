#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fprune/flops.hpp"
#include "fprune/model_io.hpp"
#include "fprune/network.hpp"
#include "test_util.hpp"

using namespace fprune;
using namespace fprune::testing;

namespace {

std::size_t count_kind(const ModelGraph& g, LayerKind k) {
  std::size_t n = 0;
  for (const auto& node : g.nodes()) n += node.kind == k;
  return n;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("fprune_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("published architecture sizes") {
  const auto r56 = build_architecture("resnet56", {3, 32, 32}, 10);
  CHECK(count_kind(r56, LayerKind::Conv) == 55);
  CHECK(count_kind(r56, LayerKind::Dense) == 1);
  const auto f56 = count_flops_params(r56);
  CHECK(f56.mflops() == doctest::Approx(125.49).epsilon(0.01));
  CHECK(f56.mparams() == doctest::Approx(0.85).epsilon(0.01));

  const auto vgg = count_flops_params(build_architecture("vgg16-cifar", {3, 32, 32}, 10));
  CHECK(vgg.mflops() == doctest::Approx(313.73).epsilon(0.01));
  CHECK(vgg.mparams() == doctest::Approx(14.98).epsilon(0.01));

  const auto f110 = count_flops_params(build_architecture("resnet110", {3, 32, 32}, 10));
  CHECK(f110.mparams() == doctest::Approx(1.73).epsilon(0.01));

  // 256x256 inputs: resolution adaptation is unstated, hence the wider band
  const auto m56 = count_flops_params(build_architecture("resnet56", {3, 256, 256}, 3));
  const auto m110 = count_flops_params(build_architecture("resnet110", {3, 256, 256}, 3));
  CHECK(m56.mflops() == doctest::Approx(8167.62).epsilon(0.05));
  CHECK(m110.mflops() == doctest::Approx(16453.47).epsilon(0.05));
}

TEST_CASE("exact hand-counted totals") {
  // 3x3 conv layers: stem 3->16 plus 9 blocks x 2 convs per stage, option-A shortcuts
  const auto f = count_flops_params(build_architecture("resnet56", {3, 32, 32}, 10));
  CHECK(f.total_flops == 125485696u);
  CHECK(f.total_params == 853018u);
}

TEST_CASE("single conv FLOP convention") {
  std::vector<LayerSpec> n;
  n.push_back(conv_node("c", "input", 3, 16));
  n.push_back(simple_node("gap", LayerKind::GlobalAvgPool, "c"));
  const ModelGraph g("one", {3, 32, 32}, 16, std::move(n));
  const auto r = count_flops_params(g);
  CHECK(r.nodes[0].flops == 442368u);
  CHECK(r.nodes[0].params == 432u);
  CHECK(r.total_flops == 442368u);

  std::ostringstream os;
  write_flop_csv(os, r);
  CHECK(os.str() == "node_id,type,flops,params\nc,conv,442368,432\ngap,global_avgpool,0,0\n"
                    "total,all,442368,432\n");
}

TEST_CASE("reduction percentages") {
  CHECK(reduction_pct(42.0, 100.0) == doctest::Approx(58.0));
  CHECK(reduction_pct(100.0, 100.0) == 0.0);
  const auto base = count_flops_params(toy_vgg());
  auto pruned = count_flops_params(toy_vgg(3, 8, 3, 3, 5, 4));
  set_reduction(pruned, base);
  REQUIRE(pruned.flop_reduction_pct.has_value());
  CHECK(*pruned.flop_reduction_pct > 0.0);
  CHECK(*pruned.flop_reduction_pct < 100.0);
}

TEST_CASE("builder errors") {
  CHECK_THROWS_AS(build_architecture("alexnet", {3, 32, 32}, 10), ConfigError);
  CHECK_THROWS_AS(build_architecture("resnet57", {3, 32, 32}, 10), ConfigError);
  CHECK_THROWS_AS(build_architecture("vgg16-cifar", {3, 24, 24}, 10), ShapeError);
  CHECK_THROWS_AS(build_architecture("resnet20", {3, 30, 30}, 10), ShapeError);
}

TEST_CASE("property: count consistency and shape inference agree with the engine") {
  Rng rng(11);
  for (const char* fam : {"resnet8", "cnn2", "vgg16-cifar:w8", "resnet14:w2"}) {
    CAPTURE(fam);
    const auto g = build_architecture(fam, {3, 16, 16}, 4);
    const auto w = init_weights(g, 3);
    CHECK(count_flops_params(g).total_params == trainable_param_count(w));
    const Tensor x = random_tensor({2, 3, 16, 16}, rng);
    const auto acts = forward(g, w, x, Mode::Eval);
    for (std::size_t i = 0; i < g.size(); ++i) {
      Shape expect{2};
      for (auto d : g.shapes()[i]) expect.push_back(d);
      CHECK(acts.outputs[i].shape() == expect);
    }
  }
}

TEST_CASE("graph validation") {
  std::vector<LayerSpec> n;
  n.push_back(conv_node("c", "input", 3, 4));
  n.push_back(conv_node("c", "c", 4, 4));
  CHECK_THROWS(ModelGraph("dup", {3, 8, 8}, 4, n));
  n[1] = conv_node("d", "missing", 4, 4);
  CHECK_THROWS(ModelGraph("dangling", {3, 8, 8}, 4, n));
}

TEST_CASE("save/load round trip") {
  const auto dir = scratch_dir("roundtrip");
  Rng rng(5);
  for (const ModelGraph& g : {toy_vgg(), toy_resnet(), build_architecture("resnet8", {3, 8, 8}, 3)}) {
    const auto w = random_weights(g, rng);
    const auto files = save_model(g, w, dir / g.family());
    const Model m = load_model(dir / g.family());
    CHECK(m.graph == g);
    CHECK(bitwise_equal(m.weights, w));
    // re-saving the loaded model reproduces both files byte for byte
    const auto again = save_model(m.graph, m.weights, dir / (g.family() + "_again"));
    CHECK(slurp(files.blob) == slurp(again.blob));
    const std::string m1 = slurp(files.manifest), m2 = slurp(again.manifest);
    CHECK(m1.substr(m1.find("nodes")) == m2.substr(m2.find("nodes")));
  }
}

TEST_CASE("load errors") {
  const auto dir = scratch_dir("load_errors");
  Rng rng(6);
  const auto g = toy_vgg();
  const auto files = save_model(g, random_weights(g, rng), dir / "m");

  SUBCASE("missing file") { CHECK_THROWS_AS(load_model(dir / "nope"), FileNotFoundError); }
  SUBCASE("truncated blob") {
    const std::string blob = slurp(files.blob);
    std::ofstream(files.blob, std::ios::binary) << blob.substr(0, blob.size() - 8);
    try {
      load_model(dir / "m");
      FAIL("expected a length mismatch");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("length mismatch") != std::string::npos);
    }
  }
  SUBCASE("version mismatch") {
    std::string man = slurp(files.manifest);
    man.replace(man.find("format_version 1"), 16, "format_version 7");
    std::ofstream(files.manifest) << man;
    CHECK_THROWS_AS(load_model(dir / "m"), FormatError);
  }
  SUBCASE("malformed manifest") {
    std::ofstream(files.manifest) << "fprune-model\nformat_version 1\nfamily x\nbogus\n";
    CHECK_THROWS_AS(load_model(dir / "m"), FormatError);
  }
}

TEST_CASE("declared [2,2] tensor over a 3-float blob names the tensor") {
  const auto dir = scratch_dir("short_blob");
  std::vector<LayerSpec> n;
  n.push_back(simple_node("gap", LayerKind::GlobalAvgPool, "input"));
  n.push_back(dense_node("fc", "gap", 2, 2, false));
  const ModelGraph g("tiny", {2, 1, 1}, 2, std::move(n));
  ModelWeights<float> w;
  w["fc"].weight = Tensor({2, 2}, {1.f, 2.f, 3.f, 4.f});
  const auto files = save_model(g, w, dir / "m");
  const std::string blob = slurp(files.blob);
  REQUIRE(blob.size() == 16);
  std::ofstream(files.blob, std::ios::binary) << blob.substr(0, 12);
  try {
    load_model(dir / "m");
    FAIL("expected an error");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("fc.weight") != std::string::npos);
  }
}
