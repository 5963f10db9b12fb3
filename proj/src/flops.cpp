#include "fprune/flops.hpp"

#include <ostream>

namespace fprune {

FlopReport count_flops_params(const ModelGraph& graph) {
  FlopReport r;
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const LayerSpec& n = graph.node(i);
    NodeCost c{n.id, n.kind, 0, 0};
    switch (n.kind) {
      case LayerKind::Conv: {
        const SampleShape& out = graph.shapes()[i];
        const std::uint64_t per_pos = n.conv.kernel_h * n.conv.kernel_w * n.conv.in_channels *
                                      n.conv.out_channels;
        c.flops = per_pos * out[1] * out[2];
        c.params = per_pos + (n.bias ? n.conv.out_channels : 0);
        break;
      }
      case LayerKind::Dense:
        c.flops = static_cast<std::uint64_t>(n.in_features) * n.out_features;
        c.params = c.flops + (n.bias ? n.out_features : 0);
        break;
      case LayerKind::BatchNorm:
        c.params = 2 * n.channels;
        break;
      default:
        break;
    }
    r.total_flops += c.flops;
    r.total_params += c.params;
    r.nodes.push_back(std::move(c));
  }
  return r;
}

double reduction_pct(double pruned, double baseline) {
  if (baseline <= 0.0) return 0.0;
  return 100.0 * (1.0 - pruned / baseline);
}

void set_reduction(FlopReport& report, const FlopReport& baseline) {
  report.flop_reduction_pct = reduction_pct(static_cast<double>(report.total_flops),
                                            static_cast<double>(baseline.total_flops));
  report.param_reduction_pct = reduction_pct(static_cast<double>(report.total_params),
                                             static_cast<double>(baseline.total_params));
}

void write_flop_csv(std::ostream& os, const FlopReport& report) {
  os << "node_id,type,flops,params\n";
  for (const NodeCost& c : report.nodes) {
    os << c.node_id << ',' << to_string(c.kind) << ',' << c.flops << ',' << c.params << '\n';
  }
  os << "total,all," << report.total_flops << ',' << report.total_params << '\n';
}

}  // namespace fprune
