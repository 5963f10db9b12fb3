#include "fprune/graph.hpp"

#include <array>
#include <charconv>
#include <set>
#include <utility>

namespace fprune {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 10> kKindNames{{
    {LayerKind::Conv, "conv"},
    {LayerKind::BatchNorm, "batchnorm"},
    {LayerKind::ReLU, "relu"},
    {LayerKind::MaxPool, "maxpool"},
    {LayerKind::AvgPool, "avgpool"},
    {LayerKind::GlobalAvgPool, "global_avgpool"},
    {LayerKind::Dense, "dense"},
    {LayerKind::Add, "add"},
    {LayerKind::ShortcutPad, "shortcut_pad"},
    {LayerKind::Softmax, "softmax"},
}};

[[noreturn]] void shape_fail(const LayerSpec& n, const std::string& what) {
  throw ShapeError("node '" + n.id + "' (" + std::string(to_string(n.kind)) + "): " + what);
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  throw FormatError("unsupported layer type '" + std::string(name) + "'");
}

ModelGraph::ModelGraph(std::string family, SampleShape input_shape, std::size_t num_classes,
                       std::vector<LayerSpec> nodes)
    : family_(std::move(family)),
      input_shape_(std::move(input_shape)),
      num_classes_(num_classes),
      nodes_(std::move(nodes)) {
  if (input_shape_.size() != 3) throw ShapeError("input shape must be (channels, height, width)");
  for (std::size_t d : input_shape_) {
    if (d == 0) throw ShapeError("input shape dimensions must be positive");
  }
  if (num_classes_ == 0) throw ShapeError("num_classes must be positive");
  if (nodes_.empty()) throw ShapeError("graph has no nodes");
  link();
  infer_shapes();
}

std::optional<std::size_t> ModelGraph::find(std::string_view id) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].id == id) return i;
  }
  return std::nullopt;
}

std::size_t ModelGraph::index_of(std::string_view id) const {
  if (auto i = find(id)) return *i;
  throw ShapeError("unknown layer id '" + std::string(id) + "'");
}

const SampleShape& ModelGraph::input_shape_of(std::size_t i) const {
  const int p = preds_.at(i).front();
  return p < 0 ? input_shape_ : shapes_[static_cast<std::size_t>(p)];
}

std::vector<std::size_t> ModelGraph::conv_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].kind == LayerKind::Conv) out.push_back(i);
  }
  return out;
}

void ModelGraph::link() {
  std::set<std::string> seen;
  preds_.assign(nodes_.size(), {});
  consumers_.assign(nodes_.size(), {});
  input_consumers_.clear();
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const LayerSpec& n = nodes_[i];
    if (n.id.empty() || n.id == kInputId) shape_fail(n, "invalid id");
    if (!seen.insert(n.id).second) shape_fail(n, "duplicate id");
    const std::size_t want = n.kind == LayerKind::Add ? 2 : 1;
    if (n.inputs.size() != want) {
      shape_fail(n, "expects " + std::to_string(want) + " input(s), got " +
                        std::to_string(n.inputs.size()));
    }
    for (const std::string& in : n.inputs) {
      if (in == kInputId) {
        preds_[i].push_back(-1);
        input_consumers_.push_back(i);
        continue;
      }
      bool found = false;
      for (std::size_t j = 0; j < i; ++j) {
        if (nodes_[j].id == in) {
          preds_[i].push_back(static_cast<int>(j));
          consumers_[j].push_back(i);
          found = true;
          break;
        }
      }
      if (!found) shape_fail(n, "input '" + in + "' is not an earlier node");
    }
  }
  for (std::size_t i = 0; i + 1 < nodes_.size(); ++i) {
    if (consumers_[i].empty()) shape_fail(nodes_[i], "output is never consumed");
  }
  if (input_consumers_.empty()) throw ShapeError("no node consumes the graph input");
}

void ModelGraph::infer_shapes() {
  shapes_.assign(nodes_.size(), {});
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const LayerSpec& n = nodes_[i];
    const SampleShape& in = input_shape_of(i);
    SampleShape out;
    auto need_chw = [&] {
      if (in.size() != 3) shape_fail(n, "expects a (C,H,W) input, got rank " + std::to_string(in.size()));
    };
    switch (n.kind) {
      case LayerKind::Conv: {
        need_chw();
        if (in[0] != n.conv.in_channels) {
          shape_fail(n, "input channels " + std::to_string(in[0]) + " != in_channels " +
                            std::to_string(n.conv.in_channels));
        }
        if (n.conv.kernel_h == 0 || n.conv.kernel_w == 0 || n.conv.out_channels == 0) {
          shape_fail(n, "kernel and channel counts must be positive");
        }
        out = {n.conv.out_channels, n.conv.out_h(in[1]), n.conv.out_w(in[2])};
        break;
      }
      case LayerKind::BatchNorm:
        if (in.empty() || in[0] != n.channels) {
          shape_fail(n, "channel count " + std::to_string(n.channels) + " does not match input");
        }
        out = in;
        break;
      case LayerKind::ReLU:
      case LayerKind::Softmax:
        out = in;
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        need_chw();
        if (n.pool_kernel == 0 || n.pool_stride == 0) shape_fail(n, "pool kernel/stride must be positive");
        if (in[1] < n.pool_kernel || in[2] < n.pool_kernel) shape_fail(n, "pool kernel exceeds input");
        out = {in[0], (in[1] - n.pool_kernel) / n.pool_stride + 1,
               (in[2] - n.pool_kernel) / n.pool_stride + 1};
        break;
      case LayerKind::GlobalAvgPool:
        need_chw();
        out = {in[0], 1, 1};
        break;
      case LayerKind::Dense: {
        std::size_t f = 1;
        for (std::size_t d : in) f *= d;
        if (f != n.in_features) {
          shape_fail(n, "input features " + std::to_string(f) + " != in_features " +
                            std::to_string(n.in_features));
        }
        if (n.out_features == 0) shape_fail(n, "out_features must be positive");
        out = {n.out_features};
        break;
      }
      case LayerKind::Add: {
        const int p1 = preds_[i][1];
        const SampleShape& other = p1 < 0 ? input_shape_ : shapes_[static_cast<std::size_t>(p1)];
        if (in != other) shape_fail(n, "operand shapes differ");
        out = in;
        break;
      }
      case LayerKind::ShortcutPad:
        need_chw();
        if (n.pool_stride == 0) shape_fail(n, "stride must be positive");
        if (n.pad_front + in[0] > n.out_features) shape_fail(n, "output channels too small");
        out = {n.out_features, (in[1] + n.pool_stride - 1) / n.pool_stride,
               (in[2] + n.pool_stride - 1) / n.pool_stride};
        break;
    }
    shapes_[i] = std::move(out);
  }
  std::size_t logits = 1;
  for (std::size_t d : shapes_.back()) logits *= d;
  if (logits != num_classes_) {
    throw ShapeError("graph output has " + std::to_string(logits) + " values but num_classes is " +
                     std::to_string(num_classes_));
  }
}

// ---------------------------------------------------------------------------
// builders
// ---------------------------------------------------------------------------

namespace {

class Builder {
 public:
  std::string conv(const std::string& id, const std::string& in, std::size_t cin,
                   std::size_t cout, std::size_t k, std::size_t stride, std::size_t pad,
                   bool bias) {
    LayerSpec n;
    n.id = id;
    n.kind = LayerKind::Conv;
    n.inputs = {in};
    n.conv = {k, k, stride, pad, cin, cout};
    n.bias = bias;
    return push(std::move(n));
  }
  std::string bn(const std::string& id, const std::string& in, std::size_t c) {
    LayerSpec n;
    n.id = id;
    n.kind = LayerKind::BatchNorm;
    n.inputs = {in};
    n.channels = c;
    return push(std::move(n));
  }
  std::string simple(const std::string& id, LayerKind kind, const std::string& in) {
    LayerSpec n;
    n.id = id;
    n.kind = kind;
    n.inputs = {in};
    return push(std::move(n));
  }
  std::string pool(const std::string& id, LayerKind kind, const std::string& in, std::size_t k,
                   std::size_t s) {
    LayerSpec n;
    n.id = id;
    n.kind = kind;
    n.inputs = {in};
    n.pool_kernel = k;
    n.pool_stride = s;
    return push(std::move(n));
  }
  std::string dense(const std::string& id, const std::string& in, std::size_t fin,
                    std::size_t fout) {
    LayerSpec n;
    n.id = id;
    n.kind = LayerKind::Dense;
    n.inputs = {in};
    n.in_features = fin;
    n.out_features = fout;
    n.bias = true;
    return push(std::move(n));
  }
  std::string add(const std::string& id, const std::string& a, const std::string& b) {
    LayerSpec n;
    n.id = id;
    n.kind = LayerKind::Add;
    n.inputs = {a, b};
    return push(std::move(n));
  }
  std::string shortcut(const std::string& id, const std::string& in, std::size_t cin,
                       std::size_t cout, std::size_t stride) {
    LayerSpec n;
    n.id = id;
    n.kind = LayerKind::ShortcutPad;
    n.inputs = {in};
    n.pool_stride = stride;
    n.out_features = cout;
    n.pad_front = (cout - cin) / 2;
    return push(std::move(n));
  }

  std::vector<LayerSpec> take() { return std::move(nodes_); }

 private:
  std::string push(LayerSpec n) {
    nodes_.push_back(std::move(n));
    return nodes_.back().id;
  }
  std::vector<LayerSpec> nodes_;
};

void require_divisible(const SampleShape& in, std::size_t factor, std::string_view family) {
  if (in.size() != 3 || in[1] % factor != 0 || in[2] % factor != 0 || in[1] < factor ||
      in[2] < factor) {
    throw ShapeError(std::string(family) + " needs input height/width divisible by " +
                     std::to_string(factor));
  }
}

std::vector<LayerSpec> vgg16(const SampleShape& in, std::size_t classes, std::size_t div) {
  require_divisible(in, 16, "vgg16-cifar");
  // 0 marks a 2x2 max-pool; the last block is followed by global pooling.
  const std::vector<std::size_t> cfg = {64, 64, 0, 128, 128, 0, 256, 256, 256, 0,
                                        512, 512, 512, 0, 512, 512, 512};
  Builder b;
  std::string prev(kInputId);
  std::size_t cin = in[0];
  int conv_i = 0, pool_i = 0;
  for (std::size_t c : cfg) {
    if (c == 0) {
      prev = b.pool("pool" + std::to_string(++pool_i), LayerKind::MaxPool, prev, 2, 2);
      continue;
    }
    const std::size_t cout = std::max<std::size_t>(1, c / div);
    const std::string s = std::to_string(++conv_i);
    prev = b.conv("conv" + s, prev, cin, cout, 3, 1, 1, false);
    prev = b.bn("bn" + s, prev, cout);
    prev = b.simple("relu" + s, LayerKind::ReLU, prev);
    cin = cout;
  }
  prev = b.simple("gap", LayerKind::GlobalAvgPool, prev);
  const std::size_t hidden = std::max<std::size_t>(1, 512 / div);
  prev = b.dense("fc1", prev, cin, hidden);
  prev = b.simple("fc1_relu", LayerKind::ReLU, prev);
  b.dense("fc2", prev, hidden, classes);
  return b.take();
}

std::vector<LayerSpec> resnet(const SampleShape& in, std::size_t classes, std::size_t depth,
                              std::size_t div) {
  require_divisible(in, 4, "resnet");
  const std::size_t blocks = (depth - 2) / 6;
  Builder b;
  const std::size_t base = std::max<std::size_t>(1, 16 / div);
  std::string prev = b.conv("stem_conv", std::string(kInputId), in[0], base, 3, 1, 1, false);
  prev = b.bn("stem_bn", prev, base);
  prev = b.simple("stem_relu", LayerKind::ReLU, prev);
  std::size_t cin = base;
  for (std::size_t stage = 1; stage <= 3; ++stage) {
    const std::size_t width = base << (stage - 1);
    for (std::size_t blk = 1; blk <= blocks; ++blk) {
      const std::string p = "s" + std::to_string(stage) + "b" + std::to_string(blk) + "_";
      const std::size_t stride = (stage > 1 && blk == 1) ? 2 : 1;
      std::string x = b.conv(p + "conv1", prev, cin, width, 3, stride, 1, false);
      x = b.bn(p + "bn1", x, width);
      x = b.simple(p + "relu1", LayerKind::ReLU, x);
      x = b.conv(p + "conv2", x, width, width, 3, 1, 1, false);
      x = b.bn(p + "bn2", x, width);
      std::string shortcut = prev;
      if (stride != 1 || cin != width) shortcut = b.shortcut(p + "shortcut", prev, cin, width, stride);
      x = b.add(p + "add", x, shortcut);
      prev = b.simple(p + "relu2", LayerKind::ReLU, x);
      cin = width;
    }
  }
  prev = b.simple("gap", LayerKind::GlobalAvgPool, prev);
  b.dense("fc", prev, cin, classes);
  return b.take();
}

std::vector<LayerSpec> cnn2(const SampleShape& in, std::size_t classes, std::size_t div) {
  require_divisible(in, 2, "cnn2");
  Builder b;
  const std::size_t c1 = std::max<std::size_t>(1, 16 / div), c2 = std::max<std::size_t>(1, 32 / div);
  std::string x = b.conv("conv1", std::string(kInputId), in[0], c1, 3, 1, 1, false);
  x = b.bn("bn1", x, c1);
  x = b.simple("relu1", LayerKind::ReLU, x);
  x = b.pool("pool1", LayerKind::MaxPool, x, 2, 2);
  x = b.conv("conv2", x, c1, c2, 3, 1, 1, false);
  x = b.bn("bn2", x, c2);
  x = b.simple("relu2", LayerKind::ReLU, x);
  x = b.simple("gap", LayerKind::GlobalAvgPool, x);
  b.dense("fc", x, c2, classes);
  return b.take();
}

}  // namespace

ModelGraph build_architecture(std::string_view family, const SampleShape& input_shape,
                              std::size_t num_classes) {
  std::string_view base = family;
  std::size_t div = 1;
  if (const auto colon = family.find(':'); colon != std::string_view::npos) {
    base = family.substr(0, colon);
    const std::string_view mod = family.substr(colon + 1);
    if (mod.size() < 2 || mod[0] != 'w' ||
        std::from_chars(mod.data() + 1, mod.data() + mod.size(), div).ec != std::errc{} ||
        div == 0) {
      throw ConfigError("bad architecture modifier '" + std::string(mod) + "'");
    }
  }
  if (input_shape.size() != 3) throw ShapeError("input shape must be (channels, height, width)");

  std::vector<LayerSpec> nodes;
  if (base == "vgg16-cifar") {
    nodes = vgg16(input_shape, num_classes, div);
  } else if (base == "cnn2") {
    nodes = cnn2(input_shape, num_classes, div);
  } else if (base.starts_with("resnet")) {
    std::size_t depth = 0;
    const std::string_view digits = base.substr(6);
    if (digits.empty() ||
        std::from_chars(digits.data(), digits.data() + digits.size(), depth).ec != std::errc{} ||
        depth < 8 || (depth - 2) % 6 != 0) {
      throw ConfigError("unknown architecture family '" + std::string(family) + "'");
    }
    nodes = resnet(input_shape, num_classes, depth, div);
  } else {
    throw ConfigError("unknown architecture family '" + std::string(family) + "'");
  }
  return ModelGraph(std::string(family), input_shape, num_classes, std::move(nodes));
}

}  // namespace fprune
