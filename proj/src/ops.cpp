#include "fprune/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Core>

namespace fprune::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline Eigen::Index ix(std::size_t n) { return static_cast<Eigen::Index>(n); }

void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

void require_4d(const Shape& s, const char* name) {
  require(s.size() == 4, std::string(name) + " must be 4-D NCHW, got " + shape_str(s));
}

std::size_t conv_out(std::size_t n, std::size_t kernel, std::size_t stride, std::size_t padding,
                     const char* axis) {
  if (stride == 0) throw ShapeError("conv stride must be positive");
  if (n + 2 * padding < kernel) {
    throw ShapeError(std::string("conv kernel ") + axis + " " + std::to_string(kernel) +
                     " exceeds padded input " + axis + " " + std::to_string(n + 2 * padding));
  }
  return (n + 2 * padding - kernel) / stride + 1;
}

// col is [C*KH*KW, OH*OW]
template <typename T>
void im2col(const T* img, const ConvParams& p, std::size_t h, std::size_t w, std::size_t oh,
            std::size_t ow, T* col) {
  const std::size_t plane = oh * ow;
  std::size_t row = 0;
  for (std::size_t c = 0; c < p.in_channels; ++c) {
    const T* src = img + c * h * w;
    for (std::size_t ki = 0; ki < p.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < p.kernel_w; ++kj, ++row) {
        T* dst = col + row * plane;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y * p.stride + ki) - static_cast<long>(p.padding);
          for (std::size_t x = 0; x < ow; ++x) {
            const long ix = static_cast<long>(x * p.stride + kj) - static_cast<long>(p.padding);
            const bool inside = iy >= 0 && iy < static_cast<long>(h) && ix >= 0 &&
                                ix < static_cast<long>(w);
            dst[y * ow + x] = inside ? src[iy * static_cast<long>(w) + ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvParams& p, std::size_t h, std::size_t w, std::size_t oh,
                std::size_t ow, T* img) {
  const std::size_t plane = oh * ow;
  std::size_t row = 0;
  for (std::size_t c = 0; c < p.in_channels; ++c) {
    T* dst = img + c * h * w;
    for (std::size_t ki = 0; ki < p.kernel_h; ++ki) {
      for (std::size_t kj = 0; kj < p.kernel_w; ++kj, ++row) {
        const T* src = col + row * plane;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y * p.stride + ki) - static_cast<long>(p.padding);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t x = 0; x < ow; ++x) {
            const long ix = static_cast<long>(x * p.stride + kj) - static_cast<long>(p.padding);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            dst[iy * static_cast<long>(w) + ix] += src[y * ow + x];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvParams& p) {
  return p.kernel_h == 1 && p.kernel_w == 1 && p.stride == 1 && p.padding == 0;
}

std::size_t pooled(std::size_t n, std::size_t kernel, std::size_t stride) {
  require(kernel >= 1 && stride >= 1, "pool kernel and stride must be positive");
  require(n >= kernel, "pool kernel " + std::to_string(kernel) + " exceeds input extent " +
                           std::to_string(n));
  return (n - kernel) / stride + 1;
}

Shape per_channel_shape(const Shape& s) {
  require(s.size() == 2 || s.size() == 4,
          "batch norm expects [N,C] or [N,C,H,W], got " + shape_str(s));
  return s;
}

std::size_t spatial_size(const Shape& s) { return s.size() == 4 ? s[2] * s[3] : 1; }

}  // namespace

std::size_t ConvParams::out_h(std::size_t in_h) const {
  return conv_out(in_h, kernel_h, stride, padding, "height");
}

std::size_t ConvParams::out_w(std::size_t in_w) const {
  return conv_out(in_w, kernel_w, stride, padding, "width");
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                              const BasicTensor<T>* bias, const ConvParams& p) {
  require_4d(input.shape(), "conv input");
  require_4d(weights.shape(), "conv weights");
  require(input.dim(1) == p.in_channels,
          "conv input channel dimension " + std::to_string(input.dim(1)) +
              " does not match in_channels " + std::to_string(p.in_channels));
  require(weights.shape() == p.weight_shape(),
          "conv weight shape " + shape_str(weights.shape()) + " does not match expected " +
              shape_str(p.weight_shape()));
  if (bias != nullptr && !bias->empty()) {
    require(bias->size() == p.out_channels,
            "conv bias length " + std::to_string(bias->size()) + " does not match out_channels " +
                std::to_string(p.out_channels));
  }

  const std::size_t n = input.dim(0), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = p.out_h(h), ow = p.out_w(w);
  const std::size_t plane = oh * ow;
  const std::size_t ckk = p.in_channels * p.kernel_h * p.kernel_w;

  BasicTensor<T> out({n, p.out_channels, oh, ow});
  const bool pointwise = is_pointwise(p);
  std::vector<T, TrackingAllocator<T>> col(pointwise ? 0 : ckk * plane);
  const T* wd = weights.data();

  for (std::size_t s = 0; s < n; ++s) {
    const T* img = input.data() + s * p.in_channels * h * w;
    const T* cols = img;
    if (!pointwise) {
      im2col(img, p, h, w, oh, ow, col.data());
      cols = col.data();
    }
    T* o = out.data() + s * p.out_channels * plane;
    MatMap<T>(o, ix(p.out_channels), ix(plane)).noalias() =
        ConstMatMap<T>(wd, ix(p.out_channels), ix(ckk)) * ConstMatMap<T>(cols, ix(ckk), ix(plane));
    if (bias != nullptr && !bias->empty()) {
      for (std::size_t k = 0; k < p.out_channels; ++k) {
        const T b = (*bias)[k];
        T* orow = o + k * plane;
        for (std::size_t j = 0; j < plane; ++j) orow[j] += b;
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                             const BasicTensor<T>& grad_out, const ConvParams& p,
                             bool want_input_grad, bool want_bias_grad) {
  require_4d(input.shape(), "conv input");
  const std::size_t n = input.dim(0), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = p.out_h(h), ow = p.out_w(w);
  require(grad_out.shape() == Shape({n, p.out_channels, oh, ow}),
          "conv output gradient shape " + shape_str(grad_out.shape()) + " is inconsistent");
  const std::size_t plane = oh * ow;
  const std::size_t ckk = p.in_channels * p.kernel_h * p.kernel_w;

  ConvGrads<T> g;
  g.weights = BasicTensor<T>(weights.shape());
  if (want_bias_grad) g.bias = BasicTensor<T>({p.out_channels});
  if (want_input_grad) g.input = BasicTensor<T>(input.shape());

  const bool pointwise = is_pointwise(p);
  std::vector<T, TrackingAllocator<T>> col(pointwise ? 0 : ckk * plane);
  std::vector<T, TrackingAllocator<T>> dcol(want_input_grad ? ckk * plane : 0);
  MatMap<T> dw(g.weights.data(), ix(p.out_channels), ix(ckk));
  const ConstMatMap<T> wm(weights.data(), ix(p.out_channels), ix(ckk));

  for (std::size_t s = 0; s < n; ++s) {
    const T* img = input.data() + s * p.in_channels * h * w;
    const T* go = grad_out.data() + s * p.out_channels * plane;
    const T* cols = img;
    if (!pointwise) {
      im2col(img, p, h, w, oh, ow, col.data());
      cols = col.data();
    }
    const ConstMatMap<T> gm(go, ix(p.out_channels), ix(plane));
    dw.noalias() += gm * ConstMatMap<T>(cols, ix(ckk), ix(plane)).transpose();
    if (want_bias_grad) {
      for (std::size_t k = 0; k < p.out_channels; ++k) {
        const T* gorow = go + k * plane;
        T acc{0};
        for (std::size_t j = 0; j < plane; ++j) acc += gorow[j];
        g.bias[k] += acc;
      }
    }
    if (want_input_grad) {
      T* gin = g.input.data() + s * p.in_channels * h * w;
      if (pointwise) {
        MatMap<T>(gin, ix(ckk), ix(plane)).noalias() += wm.transpose() * gm;
      } else {
        MatMap<T>(dcol.data(), ix(ckk), ix(plane)).noalias() = wm.transpose() * gm;
        col2im_add(dcol.data(), p, h, w, oh, ow, gin);
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> batchnorm_forward_eval(const BasicTensor<T>& x, const BatchNormParams<T>& p) {
  const Shape& s = per_channel_shape(x.shape());
  const std::size_t n = s[0], c = s[1], hw = spatial_size(s);
  require(p.gamma->size() == c, "batch norm channel count " + std::to_string(p.gamma->size()) +
                                    " does not match input channels " + std::to_string(c));
  BasicTensor<T> y(s);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double inv = 1.0 / std::sqrt(static_cast<double>((*p.running_var)[ch]) + kBatchNormEps);
    const T scale = static_cast<T>(static_cast<double>((*p.gamma)[ch]) * inv);
    const T shift = static_cast<T>(static_cast<double>((*p.beta)[ch]) -
                                   static_cast<double>((*p.running_mean)[ch]) *
                                       static_cast<double>((*p.gamma)[ch]) * inv);
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = x.data() + (i * c + ch) * hw;
      T* dst = y.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) dst[j] = src[j] * scale + shift;
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> batchnorm_forward_train(const BasicTensor<T>& x, const BatchNormParams<T>& p,
                                       BatchNormCache<T>& cache) {
  const Shape& s = per_channel_shape(x.shape());
  const std::size_t n = s[0], c = s[1], hw = spatial_size(s);
  require(p.gamma->size() == c, "batch norm channel count " + std::to_string(p.gamma->size()) +
                                    " does not match input channels " + std::to_string(c));
  cache.mean.assign(c, 0.0);
  cache.var.assign(c, 0.0);
  cache.inv_std.assign(c, 0.0);
  cache.count = n * hw;
  const double m = static_cast<double>(cache.count);

  BasicTensor<T> y(s);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = x.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) sum += static_cast<double>(src[j]);
    }
    const double mean = sum / m;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = x.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const double d = static_cast<double>(src[j]) - mean;
        sq += d * d;
      }
    }
    const double var = sq / m;
    const double inv = 1.0 / std::sqrt(var + kBatchNormEps);
    cache.mean[ch] = mean;
    cache.var[ch] = var;
    cache.inv_std[ch] = inv;
    const double gamma = static_cast<double>((*p.gamma)[ch]);
    const double beta = static_cast<double>((*p.beta)[ch]);
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = x.data() + (i * c + ch) * hw;
      T* dst = y.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        dst[j] = static_cast<T>((static_cast<double>(src[j]) - mean) * inv * gamma + beta);
      }
    }
  }
  return y;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out,
                                     const BatchNormParams<T>& p, const BatchNormCache<T>* cache) {
  const Shape& s = per_channel_shape(x.shape());
  require(grad_out.shape() == s, "batch norm gradient shape mismatch");
  const std::size_t n = s[0], c = s[1], hw = spatial_size(s);

  BatchNormGrads<T> g{BasicTensor<T>(s), BasicTensor<T>({c}), BasicTensor<T>({c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean, inv;
    if (cache != nullptr) {
      mean = cache->mean[ch];
      inv = cache->inv_std[ch];
    } else {
      mean = static_cast<double>((*p.running_mean)[ch]);
      inv = 1.0 / std::sqrt(static_cast<double>((*p.running_var)[ch]) + kBatchNormEps);
    }
    const double gamma = static_cast<double>((*p.gamma)[ch]);

    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = x.data() + (i * c + ch) * hw;
      const T* gy = grad_out.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const double xhat = (static_cast<double>(src[j]) - mean) * inv;
        sum_dy += static_cast<double>(gy[j]);
        sum_dy_xhat += static_cast<double>(gy[j]) * xhat;
      }
    }
    g.gamma[ch] = static_cast<T>(sum_dy_xhat);
    g.beta[ch] = static_cast<T>(sum_dy);

    const double m = static_cast<double>(n * hw);
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = x.data() + (i * c + ch) * hw;
      const T* gy = grad_out.data() + (i * c + ch) * hw;
      T* gx = g.input.data() + (i * c + ch) * hw;
      for (std::size_t j = 0; j < hw; ++j) {
        if (cache != nullptr) {
          const double xhat = (static_cast<double>(src[j]) - mean) * inv;
          gx[j] = static_cast<T>(gamma * inv / m *
                                 (m * static_cast<double>(gy[j]) - sum_dy - xhat * sum_dy_xhat));
        } else {
          gx[j] = static_cast<T>(static_cast<double>(gy[j]) * gamma * inv);
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// elementwise / pooling
// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out) {
  require(x.shape() == grad_out.shape(), "relu gradient shape mismatch");
  BasicTensor<T> g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > T{0} ? grad_out[i] : T{0};
  return g;
}

template <typename T>
BasicTensor<T> maxpool_forward(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride,
                               std::vector<std::uint32_t>* argmax) {
  require_4d(x.shape(), "max-pool input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = pooled(h, kernel, stride), ow = pooled(w, kernel, stride);
  BasicTensor<T> y({n, c, oh, ow});
  if (argmax != nullptr) argmax->assign(y.size(), 0);
  std::size_t o = 0;
  for (std::size_t pc = 0; pc < n * c; ++pc) {
    const T* src = x.data() + pc * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        std::size_t best = oy * stride * w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = (oy * stride + ky) * w + ox * stride + kx;
            if (src[idx] > src[best]) best = idx;
          }
        }
        y[o] = src[best];
        if (argmax != nullptr) (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> maxpool_backward(const Shape& input_shape, const BasicTensor<T>& grad_out,
                                const std::vector<std::uint32_t>& argmax) {
  require(argmax.size() == grad_out.size(), "max-pool argmax does not match gradient");
  BasicTensor<T> g(input_shape);
  const std::size_t hw = input_shape[2] * input_shape[3];
  const std::size_t ohw = grad_out.dim(2) * grad_out.dim(3);
  for (std::size_t o = 0; o < grad_out.size(); ++o) {
    const std::size_t pc = o / ohw;
    g[pc * hw + argmax[o]] += grad_out[o];
  }
  return g;
}

template <typename T>
BasicTensor<T> avgpool_forward(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride) {
  require_4d(x.shape(), "avg-pool input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = pooled(h, kernel, stride), ow = pooled(w, kernel, stride);
  BasicTensor<T> y({n, c, oh, ow});
  const T inv = T{1} / static_cast<T>(kernel * kernel);
  std::size_t o = 0;
  for (std::size_t pc = 0; pc < n * c; ++pc) {
    const T* src = x.data() + pc * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        T acc{0};
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            acc += src[(oy * stride + ky) * w + ox * stride + kx];
          }
        }
        y[o] = acc * inv;
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> avgpool_backward(const Shape& input_shape, const BasicTensor<T>& grad_out,
                                std::size_t kernel, std::size_t stride) {
  BasicTensor<T> g(input_shape);
  const std::size_t h = input_shape[2], w = input_shape[3];
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  const T inv = T{1} / static_cast<T>(kernel * kernel);
  std::size_t o = 0;
  for (std::size_t pc = 0; pc < input_shape[0] * input_shape[1]; ++pc) {
    T* dst = g.data() + pc * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        const T v = grad_out[o] * inv;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            dst[(oy * stride + ky) * w + ox * stride + kx] += v;
          }
        }
      }
    }
  }
  return g;
}

template <typename T>
BasicTensor<T> global_avgpool_forward(const BasicTensor<T>& x) {
  require_4d(x.shape(), "global-avg-pool input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  BasicTensor<T> y({n, c, 1, 1});
  for (std::size_t pc = 0; pc < n * c; ++pc) {
    const T* src = x.data() + pc * hw;
    T acc{0};
    for (std::size_t j = 0; j < hw; ++j) acc += src[j];
    y[pc] = acc / static_cast<T>(hw);
  }
  return y;
}

template <typename T>
BasicTensor<T> global_avgpool_backward(const Shape& input_shape, const BasicTensor<T>& grad_out) {
  BasicTensor<T> g(input_shape);
  const std::size_t hw = input_shape[2] * input_shape[3];
  for (std::size_t pc = 0; pc < input_shape[0] * input_shape[1]; ++pc) {
    const T v = grad_out[pc] / static_cast<T>(hw);
    T* dst = g.data() + pc * hw;
    for (std::size_t j = 0; j < hw; ++j) dst[j] = v;
  }
  return g;
}

template <typename T>
BasicTensor<T> dense_forward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                             const BasicTensor<T>* bias) {
  require(weights.rank() == 2, "dense weights must be 2-D, got " + shape_str(weights.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t in = x.size() / n, out = weights.dim(0);
  require(weights.dim(1) == in, "dense input features " + std::to_string(in) +
                                    " do not match weight columns " +
                                    std::to_string(weights.dim(1)));
  BasicTensor<T> y({n, out});
  MatMap<T> ym(y.data(), ix(n), ix(out));
  ym.noalias() = ConstMatMap<T>(x.data(), ix(n), ix(in)) *
                 ConstMatMap<T>(weights.data(), ix(out), ix(in)).transpose();
  if (bias != nullptr && !bias->empty()) {
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t o = 0; o < out; ++o) y[s * out + o] += (*bias)[o];
    }
  }
  return y;
}

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                             const BasicTensor<T>& grad_out, bool want_bias_grad) {
  const std::size_t n = x.dim(0);
  const std::size_t in = x.size() / n, out = weights.dim(0);
  require(grad_out.size() == n * out, "dense gradient shape mismatch");
  DenseGrads<T> g{BasicTensor<T>(x.shape()), BasicTensor<T>(weights.shape()), {}};
  if (want_bias_grad) g.bias = BasicTensor<T>({out});
  const ConstMatMap<T> gm(grad_out.data(), ix(n), ix(out));
  const ConstMatMap<T> xm(x.data(), ix(n), ix(in));
  MatMap<T>(g.weights.data(), ix(out), ix(in)).noalias() = gm.transpose() * xm;
  MatMap<T>(g.input.data(), ix(n), ix(in)).noalias() =
      gm * ConstMatMap<T>(weights.data(), ix(out), ix(in));
  if (want_bias_grad) {
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t o = 0; o < out; ++o) g.bias[o] += grad_out[s * out + o];
    }
  }
  return g;
}

template <typename T>
BasicTensor<T> add_forward(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.shape() == b.shape(), "residual add operands differ: " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  BasicTensor<T> y(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
  return y;
}

template <typename T>
BasicTensor<T> shortcut_pad_forward(const BasicTensor<T>& x, std::size_t stride,
                                    std::size_t out_channels, std::size_t pad_front) {
  require_4d(x.shape(), "shortcut input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(pad_front + c <= out_channels, "shortcut output channels too small for its input");
  require(stride >= 1, "shortcut stride must be positive");
  const std::size_t oh = (h + stride - 1) / stride, ow = (w + stride - 1) / stride;
  BasicTensor<T> y({n, out_channels, oh, ow});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          y.at(s, ch + pad_front, oy, ox) = x.at(s, ch, oy * stride, ox * stride);
        }
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> shortcut_pad_backward(const Shape& input_shape, const BasicTensor<T>& grad_out,
                                     std::size_t stride, std::size_t pad_front) {
  BasicTensor<T> g(input_shape);
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  for (std::size_t s = 0; s < input_shape[0]; ++s) {
    for (std::size_t ch = 0; ch < input_shape[1]; ++ch) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          g.at(s, ch, oy * stride, ox * stride) = grad_out.at(s, ch + pad_front, oy, ox);
        }
      }
    }
  }
  return g;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  const std::size_t n = logits.dim(0);
  const std::size_t k = logits.size() / n;
  BasicTensor<T> p(logits.shape());
  for (std::size_t s = 0; s < n; ++s) {
    const T* z = logits.data() + s * k;
    T* out = p.data() + s * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(z[j]));
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(z[j]) - mx);
    for (std::size_t j = 0; j < k; ++j) {
      out[j] = static_cast<T>(std::exp(static_cast<double>(z[j]) - mx) / denom);
    }
  }
  return p;
}

#define FPRUNE_INSTANTIATE_OPS(T)                                                               \
  template BasicTensor<T> conv2d_forward(const BasicTensor<T>&, const BasicTensor<T>&,         \
                                         const BasicTensor<T>*, const ConvParams&);            \
  template ConvGrads<T> conv2d_backward(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                        const BasicTensor<T>&, const ConvParams&, bool, bool); \
  template BasicTensor<T> batchnorm_forward_eval(const BasicTensor<T>&,                        \
                                                 const BatchNormParams<T>&);                   \
  template BasicTensor<T> batchnorm_forward_train(const BasicTensor<T>&,                       \
                                                  const BatchNormParams<T>&,                   \
                                                  BatchNormCache<T>&);                         \
  template BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>&, const BasicTensor<T>&,  \
                                                const BatchNormParams<T>&,                     \
                                                const BatchNormCache<T>*);                     \
  template BasicTensor<T> relu_forward(const BasicTensor<T>&);                                 \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> maxpool_forward(const BasicTensor<T>&, std::size_t, std::size_t,     \
                                          std::vector<std::uint32_t>*);                        \
  template BasicTensor<T> maxpool_backward(const Shape&, const BasicTensor<T>&,                \
                                           const std::vector<std::uint32_t>&);                 \
  template BasicTensor<T> avgpool_forward(const BasicTensor<T>&, std::size_t, std::size_t);    \
  template BasicTensor<T> avgpool_backward(const Shape&, const BasicTensor<T>&, std::size_t,   \
                                           std::size_t);                                       \
  template BasicTensor<T> global_avgpool_forward(const BasicTensor<T>&);                       \
  template BasicTensor<T> global_avgpool_backward(const Shape&, const BasicTensor<T>&);        \
  template BasicTensor<T> dense_forward(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                        const BasicTensor<T>*);                                \
  template DenseGrads<T> dense_backward(const BasicTensor<T>&, const BasicTensor<T>&,          \
                                        const BasicTensor<T>&, bool);                          \
  template BasicTensor<T> add_forward(const BasicTensor<T>&, const BasicTensor<T>&);           \
  template BasicTensor<T> shortcut_pad_forward(const BasicTensor<T>&, std::size_t,             \
                                               std::size_t, std::size_t);                      \
  template BasicTensor<T> shortcut_pad_backward(const Shape&, const BasicTensor<T>&,           \
                                                std::size_t, std::size_t);                     \
  template BasicTensor<T> softmax(const BasicTensor<T>&);

FPRUNE_INSTANTIATE_OPS(float)
FPRUNE_INSTANTIATE_OPS(double)

#undef FPRUNE_INSTANTIATE_OPS

}  // namespace fprune::ops
