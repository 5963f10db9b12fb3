#include "fprune/network.hpp"

#include <cmath>
#include <string>

namespace fprune {

namespace {

template <typename T>
const ParamSet<T>& params_of(const ModelWeights<T>& w, const LayerSpec& n) {
  const auto it = w.find(n.id);
  if (it == w.end()) throw FormatError("missing weights for node '" + n.id + "'");
  return it->second;
}

template <typename T>
ops::BatchNormParams<T> bn_params(const ParamSet<T>& p) {
  return {&p.gamma, &p.beta, &p.running_mean, &p.running_var};
}

template <typename T>
void accumulate(BasicTensor<T>& dst, BasicTensor<T>&& src) {
  if (dst.empty()) {
    dst = std::move(src);
    return;
  }
  if (dst.shape() != src.shape()) throw ShapeError("gradient shape mismatch during accumulation");
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

template <typename T>
BasicTensor<T> layer_forward(const LayerSpec& n, std::span<const BasicTensor<T>* const> in,
                             const ParamSet<T>* p) {
  const std::size_t want = n.kind == LayerKind::Add ? 2 : 1;
  if (in.size() != want) {
    throw ShapeError("node '" + n.id + "' expects " + std::to_string(want) + " input(s)");
  }
  if (n.is_parametric() && p == nullptr) {
    throw FormatError("missing weights for node '" + n.id + "'");
  }
  const BasicTensor<T>& x = *in[0];
  switch (n.kind) {
    case LayerKind::Conv:
      return ops::conv2d_forward(x, p->weight, n.bias ? &p->bias : nullptr, n.conv);
    case LayerKind::BatchNorm:
      return ops::batchnorm_forward_eval(x, bn_params(*p));
    case LayerKind::ReLU:
      return ops::relu_forward(x);
    case LayerKind::MaxPool:
      return ops::maxpool_forward<T>(x, n.pool_kernel, n.pool_stride, nullptr);
    case LayerKind::AvgPool:
      return ops::avgpool_forward(x, n.pool_kernel, n.pool_stride);
    case LayerKind::GlobalAvgPool:
      return ops::global_avgpool_forward(x);
    case LayerKind::Dense:
      return ops::dense_forward(x, p->weight, n.bias ? &p->bias : nullptr);
    case LayerKind::Add:
      return ops::add_forward(x, *in[1]);
    case LayerKind::ShortcutPad:
      return ops::shortcut_pad_forward(x, n.pool_stride, n.out_features, n.pad_front);
    case LayerKind::Softmax:
      return ops::softmax(x);
  }
  throw FormatError("unsupported layer type");
}

template <typename T>
Activations<T> forward(const ModelGraph& graph, const ModelWeights<T>& weights,
                       const BasicTensor<T>& input, Mode mode) {
  const SampleShape& is = graph.input_shape();
  if (input.rank() != 4 || input.dim(1) != is[0] || input.dim(2) != is[1] ||
      input.dim(3) != is[2]) {
    throw ShapeError("input batch " + shape_str(input.shape()) + " does not match model input " +
                     shape_str(is));
  }
  Activations<T> a;
  a.mode = mode;
  a.input = input;
  a.outputs.resize(graph.size());
  a.bn.resize(graph.size());
  a.argmax.resize(graph.size());

  for (std::size_t i = 0; i < graph.size(); ++i) {
    const LayerSpec& n = graph.node(i);
    const ParamSet<T>* p = n.is_parametric() ? &params_of(weights, n) : nullptr;
    const BasicTensor<T>* ins[2] = {&a.input_of(graph, i, 0), nullptr};
    if (n.kind == LayerKind::Add) ins[1] = &a.input_of(graph, i, 1);

    if (n.kind == LayerKind::BatchNorm && mode == Mode::Train) {
      a.outputs[i] = ops::batchnorm_forward_train(*ins[0], bn_params(*p), a.bn[i]);
    } else if (n.kind == LayerKind::MaxPool) {
      a.outputs[i] = ops::maxpool_forward(*ins[0], n.pool_kernel, n.pool_stride, &a.argmax[i]);
    } else {
      a.outputs[i] = layer_forward<T>(n, std::span<const BasicTensor<T>* const>(ins, n.kind == LayerKind::Add ? 2 : 1), p);
    }
    if (mode == Mode::Train && !a.outputs[i].all_finite()) {
      throw NumericError("non-finite output at layer " + std::to_string(i) + " ('" + n.id + "')",
                         static_cast<int>(i));
    }
  }
  return a;
}

template <typename T>
BasicTensor<T> forward_streaming(const ModelGraph& graph, const ModelWeights<T>& weights,
                                 const BasicTensor<T>& input, const NodeVisitor<T>& visit) {
  const SampleShape& is = graph.input_shape();
  if (input.rank() != 4 || input.dim(1) != is[0] || input.dim(2) != is[1] ||
      input.dim(3) != is[2]) {
    throw ShapeError("input batch " + shape_str(input.shape()) + " does not match model input " +
                     shape_str(is));
  }
  std::vector<BasicTensor<T>> outputs(graph.size());
  std::vector<std::size_t> pending(graph.size());
  for (std::size_t i = 0; i < graph.size(); ++i) pending[i] = graph.consumers()[i].size();

  for (std::size_t i = 0; i < graph.size(); ++i) {
    const LayerSpec& n = graph.node(i);
    const ParamSet<T>* p = n.is_parametric() ? &params_of(weights, n) : nullptr;
    const auto& preds = graph.predecessors()[i];
    const BasicTensor<T>* ins[2] = {nullptr, nullptr};
    for (std::size_t k = 0; k < preds.size(); ++k) {
      ins[k] = preds[k] < 0 ? &input : &outputs[static_cast<std::size_t>(preds[k])];
    }
    outputs[i] = layer_forward<T>(n, std::span<const BasicTensor<T>* const>(ins, preds.size()), p);
    if (visit) visit(i, *ins[0], outputs[i]);
    for (int pr : preds) {
      if (pr >= 0 && --pending[static_cast<std::size_t>(pr)] == 0) {
        outputs[static_cast<std::size_t>(pr)] = BasicTensor<T>();
      }
    }
  }
  return std::move(outputs.back());
}

template <typename T>
BasicTensor<T> predict(const ModelGraph& graph, const ModelWeights<T>& weights,
                       const BasicTensor<T>& input) {
  return forward_streaming<T>(graph, weights, input, {});
}

template <typename T>
BackwardResult<T> backward_from(const ModelGraph& graph, const ModelWeights<T>& weights,
                                const Activations<T>& acts, const BasicTensor<T>& grad_logits,
                                bool keep_node_grads) {
  if (grad_logits.shape() != acts.logits().shape()) {
    throw ShapeError("logit gradient shape " + shape_str(grad_logits.shape()) +
                     " does not match logits " + shape_str(acts.logits().shape()));
  }
  BackwardResult<T> r;
  r.param_grads = zeros_like(weights, /*trainable_only=*/true);
  std::vector<BasicTensor<T>> g(graph.size());
  g.back() = grad_logits;

  for (std::size_t ii = graph.size(); ii-- > 0;) {
    if (g[ii].empty()) continue;
    const LayerSpec& n = graph.node(ii);
    const auto& preds = graph.predecessors()[ii];
    const BasicTensor<T>& x = acts.input_of(graph, ii, 0);
    const bool need_input = preds[0] >= 0;
    BasicTensor<T> gx;

    switch (n.kind) {
      case LayerKind::Conv: {
        const ParamSet<T>& p = params_of(weights, n);
        auto cg = ops::conv2d_backward(x, p.weight, g[ii], n.conv, need_input, n.bias);
        ParamSet<T>& pg = r.param_grads.at(n.id);
        pg.weight = std::move(cg.weights);
        if (n.bias) pg.bias = std::move(cg.bias);
        gx = std::move(cg.input);
        break;
      }
      case LayerKind::BatchNorm: {
        const ParamSet<T>& p = params_of(weights, n);
        const ops::BatchNormCache<T>* cache = acts.mode == Mode::Train ? &acts.bn[ii] : nullptr;
        auto bg = ops::batchnorm_backward(x, g[ii], bn_params(p), cache);
        ParamSet<T>& pg = r.param_grads.at(n.id);
        pg.gamma = std::move(bg.gamma);
        pg.beta = std::move(bg.beta);
        gx = std::move(bg.input);
        break;
      }
      case LayerKind::ReLU:
        gx = ops::relu_backward(x, g[ii]);
        break;
      case LayerKind::MaxPool:
        gx = ops::maxpool_backward(x.shape(), g[ii], acts.argmax[ii]);
        break;
      case LayerKind::AvgPool:
        gx = ops::avgpool_backward(x.shape(), g[ii], n.pool_kernel, n.pool_stride);
        break;
      case LayerKind::GlobalAvgPool:
        gx = ops::global_avgpool_backward(x.shape(), g[ii]);
        break;
      case LayerKind::Dense: {
        const ParamSet<T>& p = params_of(weights, n);
        auto dg = ops::dense_backward(x, p.weight, g[ii], n.bias);
        ParamSet<T>& pg = r.param_grads.at(n.id);
        pg.weight = std::move(dg.weights);
        if (n.bias) pg.bias = std::move(dg.bias);
        gx = dg.input.reshaped(x.shape());
        break;
      }
      case LayerKind::Add: {
        if (preds[1] >= 0) {
          BasicTensor<T> copy = g[ii];
          accumulate(g[static_cast<std::size_t>(preds[1])], std::move(copy));
        }
        gx = g[ii];
        break;
      }
      case LayerKind::ShortcutPad:
        gx = ops::shortcut_pad_backward(x.shape(), g[ii], n.pool_stride, n.pad_front);
        break;
      case LayerKind::Softmax: {
        // dx_j = y_j (g_j - sum_k g_k y_k)
        const BasicTensor<T>& y = acts.outputs[ii];
        gx = BasicTensor<T>(y.shape());
        const std::size_t batch = y.dim(0), k = y.size() / batch;
        for (std::size_t s = 0; s < batch; ++s) {
          T dot{0};
          for (std::size_t j = 0; j < k; ++j) dot += g[ii][s * k + j] * y[s * k + j];
          for (std::size_t j = 0; j < k; ++j) {
            gx[s * k + j] = y[s * k + j] * (g[ii][s * k + j] - dot);
          }
        }
        break;
      }
    }
    if (need_input && !gx.empty()) accumulate(g[static_cast<std::size_t>(preds[0])], std::move(gx));
    if (!keep_node_grads && ii + 1 < graph.size()) g[ii] = BasicTensor<T>();
  }
  if (keep_node_grads) r.node_grads = std::move(g);
  return r;
}

template <typename T>
double cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels,
                     BasicTensor<T>* grad_logits) {
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.size() / n;
  if (labels.size() != n) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match batch " +
                     std::to_string(n));
  }
  const BasicTensor<T> prob = ops::softmax(logits);
  if (grad_logits != nullptr) *grad_logits = BasicTensor<T>(logits.shape());
  double loss = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    const int y = labels[s];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw ShapeError("label " + std::to_string(y) + " out of range for " + std::to_string(k) +
                       " classes");
    }
    // log-softmax directly from logits for accuracy
    double mx = static_cast<double>(logits[s * k]);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(logits[s * k + j]));
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(logits[s * k + j]) - mx);
    loss += -(static_cast<double>(logits[s * k + static_cast<std::size_t>(y)]) - mx - std::log(denom));
    if (grad_logits != nullptr) {
      for (std::size_t j = 0; j < k; ++j) {
        const double target = static_cast<std::size_t>(y) == j ? 1.0 : 0.0;
        (*grad_logits)[s * k + j] =
            static_cast<T>((static_cast<double>(prob[s * k + j]) - target) / static_cast<double>(n));
      }
    }
  }
  return loss / static_cast<double>(n);
}

template <typename T>
LossAndGrads<T> backward(const ModelGraph& graph, const ModelWeights<T>& weights,
                         const BasicTensor<T>& input, std::span<const int> labels, Mode mode) {
  LossAndGrads<T> out;
  out.acts = forward(graph, weights, input, mode);
  for (std::size_t i = 0; i < graph.size(); ++i) {
    if (!out.acts.outputs[i].all_finite()) {
      throw NumericError("non-finite output at layer " + std::to_string(i) + " ('" +
                             graph.node(i).id + "')",
                         static_cast<int>(i));
    }
  }
  BasicTensor<T> grad_logits;
  out.loss = cross_entropy(out.acts.logits(), labels, &grad_logits);
  if (!std::isfinite(out.loss)) {
    throw NumericError("non-finite loss", static_cast<int>(graph.output_index()));
  }
  out.grads = backward_from(graph, weights, out.acts, grad_logits).param_grads;
  return out;
}

template <typename T>
void sgd_step(ModelWeights<T>& weights, const ModelWeights<T>& grads, ModelWeights<T>& velocity,
              const SgdConfig& cfg) {
  if (cfg.lr < 0.0) throw ConfigError("learning rate must be non-negative");
  if (velocity.empty()) velocity = zeros_like(weights, /*trainable_only=*/true);
  for (auto& [id, p] : weights) {
    const auto git = grads.find(id);
    if (git == grads.end()) throw ShapeError("no gradient for node '" + id + "'");
    ParamSet<T>& v = velocity.at(id);
    for (Slot s : kAllSlots) {
      if (!is_trainable(s)) continue;
      BasicTensor<T>& w = slot_ref(p, s);
      const BasicTensor<T>& g = slot_ref(git->second, s);
      if (w.empty()) continue;
      if (g.shape() != w.shape()) {
        throw ShapeError("gradient for '" + id + "." + std::string(to_string(s)) + "' has shape " +
                         shape_str(g.shape()) + ", weights have " + shape_str(w.shape()));
      }
      BasicTensor<T>& vel = slot_ref(v, s);
      const T mu = static_cast<T>(cfg.momentum);
      const T wd = static_cast<T>(cfg.weight_decay);
      const T lr = static_cast<T>(cfg.lr);
      for (std::size_t i = 0; i < w.size(); ++i) {
        vel[i] = mu * vel[i] + (g[i] + wd * w[i]);
        if (cfg.lr != 0.0) w[i] -= lr * vel[i];
      }
    }
  }
}

template <typename T>
void update_running_stats(const ModelGraph& graph, ModelWeights<T>& weights,
                          const Activations<T>& acts, double momentum) {
  if (acts.mode != Mode::Train) return;
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const LayerSpec& n = graph.node(i);
    if (n.kind != LayerKind::BatchNorm) continue;
    const ops::BatchNormCache<T>& c = acts.bn[i];
    ParamSet<T>& p = weights.at(n.id);
    const double unbias = c.count > 1 ? static_cast<double>(c.count) / static_cast<double>(c.count - 1) : 1.0;
    for (std::size_t ch = 0; ch < n.channels; ++ch) {
      p.running_mean[ch] = static_cast<T>(momentum * static_cast<double>(p.running_mean[ch]) +
                                          (1.0 - momentum) * c.mean[ch]);
      p.running_var[ch] = static_cast<T>(momentum * static_cast<double>(p.running_var[ch]) +
                                         (1.0 - momentum) * c.var[ch] * unbias);
    }
  }
}

#define FPRUNE_INSTANTIATE_NETWORK(T)                                                          \
  template BasicTensor<T> layer_forward(const LayerSpec&,                                       \
                                        std::span<const BasicTensor<T>* const>,                 \
                                        const ParamSet<T>*);                                    \
  template Activations<T> forward(const ModelGraph&, const ModelWeights<T>&,                    \
                                  const BasicTensor<T>&, Mode);                                 \
  template BasicTensor<T> predict(const ModelGraph&, const ModelWeights<T>&,                    \
                                  const BasicTensor<T>&);                                       \
  template BasicTensor<T> forward_streaming(const ModelGraph&, const ModelWeights<T>&,          \
                                            const BasicTensor<T>&, const NodeVisitor<T>&);      \
  template BackwardResult<T> backward_from(const ModelGraph&, const ModelWeights<T>&,           \
                                           const Activations<T>&, const BasicTensor<T>&, bool); \
  template double cross_entropy(const BasicTensor<T>&, std::span<const int>, BasicTensor<T>*);  \
  template LossAndGrads<T> backward(const ModelGraph&, const ModelWeights<T>&,                  \
                                    const BasicTensor<T>&, std::span<const int>, Mode);         \
  template void sgd_step(ModelWeights<T>&, const ModelWeights<T>&, ModelWeights<T>&,            \
                         const SgdConfig&);                                                     \
  template void update_running_stats(const ModelGraph&, ModelWeights<T>&,                       \
                                     const Activations<T>&, double);

FPRUNE_INSTANTIATE_NETWORK(float)
FPRUNE_INSTANTIATE_NETWORK(double)

#undef FPRUNE_INSTANTIATE_NETWORK

}  // namespace fprune
