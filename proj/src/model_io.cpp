#include "fprune/model_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

namespace fprune {

namespace fs = std::filesystem;

namespace {

constexpr std::string_view kMagic = "fprune-model";

std::string join(const std::vector<std::string>& parts, char sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::size_t parse_size(const std::string& s, const std::string& what) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw FormatError("manifest: bad integer '" + s + "' for " + what);
  }
  return v;
}

std::string node_line(const LayerSpec& n) {
  std::ostringstream os;
  os << "node " << n.id << ' ' << to_string(n.kind) << " inputs=" << join(n.inputs, ',');
  switch (n.kind) {
    case LayerKind::Conv:
      os << " kh=" << n.conv.kernel_h << " kw=" << n.conv.kernel_w << " stride=" << n.conv.stride
         << " pad=" << n.conv.padding << " cin=" << n.conv.in_channels
         << " cout=" << n.conv.out_channels << " bias=" << (n.bias ? 1 : 0);
      break;
    case LayerKind::BatchNorm:
      os << " channels=" << n.channels;
      break;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      os << " kernel=" << n.pool_kernel << " stride=" << n.pool_stride;
      break;
    case LayerKind::Dense:
      os << " in=" << n.in_features << " out=" << n.out_features << " bias=" << (n.bias ? 1 : 0);
      break;
    case LayerKind::ShortcutPad:
      os << " out=" << n.out_features << " stride=" << n.pool_stride << " pad_front=" << n.pad_front;
      break;
    default:
      break;
  }
  return os.str();
}

LayerSpec parse_node(std::istringstream& is) {
  LayerSpec n;
  std::string kind;
  if (!(is >> n.id >> kind)) throw FormatError("manifest: truncated node line");
  n.kind = layer_kind_from_string(kind);
  std::map<std::string, std::string> kv;
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw FormatError("manifest: bad attribute '" + tok + "'");
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  auto get = [&](const std::string& key) -> std::size_t {
    const auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("manifest: node '" + n.id + "' lacks '" + key + "'");
    return parse_size(it->second, n.id + "." + key);
  };
  const auto in = kv.find("inputs");
  if (in == kv.end()) throw FormatError("manifest: node '" + n.id + "' lacks 'inputs'");
  n.inputs = split(in->second, ',');
  switch (n.kind) {
    case LayerKind::Conv:
      n.conv = {get("kh"), get("kw"), get("stride"), get("pad"), get("cin"), get("cout")};
      n.bias = get("bias") != 0;
      break;
    case LayerKind::BatchNorm:
      n.channels = get("channels");
      break;
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      n.pool_kernel = get("kernel");
      n.pool_stride = get("stride");
      break;
    case LayerKind::Dense:
      n.in_features = get("in");
      n.out_features = get("out");
      n.bias = get("bias") != 0;
      break;
    case LayerKind::ShortcutPad:
      n.out_features = get("out");
      n.pool_stride = get("stride");
      n.pad_front = get("pad_front");
      break;
    default:
      break;
  }
  return n;
}

// Tensors in manifest order: graph node order, then slot order.
template <typename F>
void for_each_tensor(const ModelGraph& graph, const ModelWeights<float>& weights, F&& f) {
  for (const LayerSpec& n : graph.nodes()) {
    if (!n.is_parametric()) continue;
    const ParamSet<float>& p = weights.at(n.id);
    for (Slot s : kAllSlots) {
      const Tensor& t = slot_ref(p, s);
      if (!t.empty()) f(n.id, s, t);
    }
  }
}

void write_le_floats(std::ostream& os, std::span<const float> v) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  } else {
    for (float f : v) {
      auto u = std::bit_cast<std::uint32_t>(f);
      char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                   static_cast<char>((u >> 16) & 0xff), static_cast<char>(u >> 24)};
      os.write(b, 4);
    }
  }
}

void read_le_floats(const char* src, std::span<float> dst) {
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const auto* b = reinterpret_cast<const unsigned char*>(src + 4 * i);
    const std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                            (static_cast<std::uint32_t>(b[2]) << 16) |
                            (static_cast<std::uint32_t>(b[3]) << 24);
    dst[i] = std::bit_cast<float>(u);
  }
}

}  // namespace

ModelFiles model_files(const fs::path& stem) {
  fs::path base = stem;
  if (base.extension() == ".manifest" || base.extension() == ".weights") base.replace_extension();
  fs::path m = base, b = base;
  m += ".manifest";
  b += ".weights";
  return {m, b};
}

std::string manifest_text(const ModelGraph& graph, const ModelWeights<float>& weights,
                          const std::string& blob_name) {
  std::ostringstream os;
  os << kMagic << '\n';
  os << "format_version " << kModelFormatVersion << '\n';
  os << "family " << (graph.family().empty() ? "custom" : graph.family()) << '\n';
  const SampleShape& in = graph.input_shape();
  os << "input_shape " << in[0] << ' ' << in[1] << ' ' << in[2] << '\n';
  os << "num_classes " << graph.num_classes() << '\n';
  os << "blob " << blob_name << '\n';
  os << "nodes " << graph.size() << '\n';
  for (const LayerSpec& n : graph.nodes()) os << node_line(n) << '\n';
  std::size_t count = 0;
  for_each_tensor(graph, weights, [&](const std::string&, Slot, const Tensor&) { ++count; });
  os << "tensors " << count << '\n';
  std::size_t offset = 0;
  for_each_tensor(graph, weights, [&](const std::string& id, Slot s, const Tensor& t) {
    std::vector<std::string> dims;
    for (std::size_t d : t.shape()) dims.push_back(std::to_string(d));
    os << "tensor " << id << ' ' << to_string(s) << ' ' << join(dims, 'x') << ' ' << offset << '\n';
    offset += t.size();
  });
  return os.str();
}

ModelFiles save_model(const ModelGraph& graph, const ModelWeights<float>& weights,
                      const fs::path& stem) {
  validate_weights(graph, weights);
  const ModelFiles files = model_files(stem);
  if (files.manifest.has_parent_path()) fs::create_directories(files.manifest.parent_path());
  {
    std::ofstream m(files.manifest, std::ios::binary);
    if (!m) throw FileNotFoundError("cannot write " + files.manifest.string());
    m << manifest_text(graph, weights, files.blob.filename().string());
  }
  std::ofstream b(files.blob, std::ios::binary);
  if (!b) throw FileNotFoundError("cannot write " + files.blob.string());
  for_each_tensor(graph, weights,
                  [&](const std::string&, Slot, const Tensor& t) { write_le_floats(b, t.values()); });
  if (!b) throw FormatError("failed writing " + files.blob.string());
  return files;
}

Model load_model(const fs::path& stem) {
  const ModelFiles files = model_files(stem);
  std::ifstream m(files.manifest, std::ios::binary);
  if (!m) throw FileNotFoundError("model manifest not found: " + files.manifest.string());

  std::string line;
  auto next = [&](const char* what) {
    if (!std::getline(m, line)) throw FormatError(std::string("manifest: missing ") + what);
    return std::istringstream(line);
  };
  if (!std::getline(m, line) || line != kMagic) throw FormatError("manifest: bad magic line");
  std::string key;
  int version = 0;
  {
    auto is = next("format_version");
    if (!(is >> key >> version) || key != "format_version") {
      throw FormatError("manifest: malformed format_version line");
    }
    if (version != kModelFormatVersion) {
      throw FormatError("manifest: format version " + std::to_string(version) +
                        " is not supported (expected " + std::to_string(kModelFormatVersion) + ")");
    }
  }
  std::string family, blob_name;
  SampleShape input(3);
  std::size_t classes = 0, node_count = 0, tensor_count = 0;
  {
    auto is = next("family");
    if (!(is >> key >> family) || key != "family") throw FormatError("manifest: malformed family line");
  }
  {
    auto is = next("input_shape");
    if (!(is >> key >> input[0] >> input[1] >> input[2]) || key != "input_shape") {
      throw FormatError("manifest: malformed input_shape line");
    }
  }
  {
    auto is = next("num_classes");
    if (!(is >> key >> classes) || key != "num_classes") throw FormatError("manifest: malformed num_classes line");
  }
  {
    auto is = next("blob");
    if (!(is >> key >> blob_name) || key != "blob") throw FormatError("manifest: malformed blob line");
  }
  {
    auto is = next("nodes");
    if (!(is >> key >> node_count) || key != "nodes") throw FormatError("manifest: malformed nodes line");
  }
  std::vector<LayerSpec> nodes;
  for (std::size_t i = 0; i < node_count; ++i) {
    auto is = next("node");
    if (!(is >> key) || key != "node") throw FormatError("manifest: expected node line, got '" + line + "'");
    nodes.push_back(parse_node(is));
  }
  {
    auto is = next("tensors");
    if (!(is >> key >> tensor_count) || key != "tensors") throw FormatError("manifest: malformed tensors line");
  }
  struct Entry {
    std::string id;
    Slot slot;
    Shape shape;
    std::size_t offset;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < tensor_count; ++i) {
    auto is = next("tensor");
    Entry e;
    std::string slot, dims;
    if (!(is >> key >> e.id >> slot >> dims >> e.offset) || key != "tensor") {
      throw FormatError("manifest: malformed tensor line '" + line + "'");
    }
    e.slot = slot_from_string(slot);
    for (const std::string& d : split(dims, 'x')) {
      const std::size_t v = parse_size(d, "tensor " + e.id + " shape");
      if (v == 0) throw FormatError("manifest: tensor '" + e.id + "' has a zero dimension");
      e.shape.push_back(v);
    }
    entries.push_back(std::move(e));
  }

  ModelGraph graph(family, input, classes, std::move(nodes));

  const fs::path blob_path = files.manifest.parent_path() / blob_name;
  std::ifstream b(blob_path, std::ios::binary);
  if (!b) throw FileNotFoundError("model weights blob not found: " + blob_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) {
    throw FormatError("blob length mismatch: " + std::to_string(bytes.size()) +
                      " bytes is not a whole number of float32 values");
  }
  const std::size_t available = bytes.size() / 4;

  ModelWeights<float> weights;
  std::size_t expected_offset = 0;
  for (const Entry& e : entries) {
    const std::size_t n = shape_numel(e.shape);
    const std::string name = e.id + "." + std::string(to_string(e.slot));
    if (e.offset != expected_offset) {
      throw FormatError("manifest: tensor '" + name + "' offset " + std::to_string(e.offset) +
                        " is not contiguous (expected " + std::to_string(expected_offset) + ")");
    }
    if (e.offset + n > available) {
      throw FormatError("blob length mismatch: tensor '" + name + "' with shape " +
                        shape_str(e.shape) + " needs " + std::to_string(n) +
                        " floats at offset " + std::to_string(e.offset) + " but the blob holds " +
                        std::to_string(available));
    }
    Tensor t(e.shape);
    read_le_floats(bytes.data() + 4 * e.offset, t.values());
    slot_ref(weights[e.id], e.slot) = std::move(t);
    expected_offset += n;
  }
  if (expected_offset != available) {
    throw FormatError("blob length mismatch: manifest declares " + std::to_string(expected_offset) +
                      " floats but the blob holds " + std::to_string(available));
  }
  validate_weights(graph, weights);
  return {std::move(graph), std::move(weights)};
}

}  // namespace fprune
