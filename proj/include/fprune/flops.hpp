#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fprune/graph.hpp"

namespace fprune {

struct NodeCost {
  std::string node_id;
  LayerKind kind = LayerKind::ReLU;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
};

/// One multiply-accumulate counts as one FLOP. Conv: kh*kw*Cin*Cout*Hout*Wout;
/// dense: in*out. Params are the trainable elements (conv/dense weights and
/// biases, batch-norm gamma and beta).
struct FlopReport {
  std::vector<NodeCost> nodes;
  std::uint64_t total_flops = 0;
  std::uint64_t total_params = 0;
  std::optional<double> flop_reduction_pct;   // 100*(1 - this/baseline)
  std::optional<double> param_reduction_pct;

  double mflops() const { return static_cast<double>(total_flops) / 1e6; }
  double mparams() const { return static_cast<double>(total_params) / 1e6; }
};

FlopReport count_flops_params(const ModelGraph& graph);

/// Fills the reduction percentages of `report` relative to `baseline`.
void set_reduction(FlopReport& report, const FlopReport& baseline);

double reduction_pct(double pruned, double baseline);

/// CSV with header `node_id,type,flops,params`, one row per node, then a
/// `total` row.
void write_flop_csv(std::ostream& os, const FlopReport& report);

}  // namespace fprune
