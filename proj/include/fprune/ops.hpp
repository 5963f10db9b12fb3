#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fprune/tensor.hpp"

// Layer kernels. All tensors are NCHW row-major; dense layers take [N, F].
// Every reduction runs in a fixed order so results are bitwise reproducible.
namespace fprune::ops {

struct ConvParams {
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;

  /// floor((n + 2*padding - kernel) / stride) + 1; throws when the padded input
  /// is smaller than the kernel.
  std::size_t out_h(std::size_t in_h) const;
  std::size_t out_w(std::size_t in_w) const;
  Shape weight_shape() const { return {out_channels, in_channels, kernel_h, kernel_w}; }

  bool operator==(const ConvParams&) const = default;
};

template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                              const BasicTensor<T>* bias, const ConvParams& params);

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;    // empty unless requested
  BasicTensor<T> weights;
  BasicTensor<T> bias;     // empty unless requested
};

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicTensor<T>& weights,
                             const BasicTensor<T>& grad_out, const ConvParams& params,
                             bool want_input_grad, bool want_bias_grad);

// ---- batch norm ----------------------------------------------------------

inline constexpr double kBatchNormEps = 1e-5;

template <typename T>
struct BatchNormParams {
  const BasicTensor<T>* gamma;
  const BasicTensor<T>* beta;
  const BasicTensor<T>* running_mean;
  const BasicTensor<T>* running_var;
};

/// Saved by the training-mode forward for the backward pass and for the
/// running-statistics update.
template <typename T>
struct BatchNormCache {
  std::vector<double> mean;
  std::vector<double> var;      // population variance of the batch
  std::vector<double> inv_std;
  std::size_t count = 0;        // elements per channel (N*H*W)
};

template <typename T>
BasicTensor<T> batchnorm_forward_eval(const BasicTensor<T>& x, const BatchNormParams<T>& p);

template <typename T>
BasicTensor<T> batchnorm_forward_train(const BasicTensor<T>& x, const BatchNormParams<T>& p,
                                       BatchNormCache<T>& cache);

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input;
  BasicTensor<T> gamma;
  BasicTensor<T> beta;
};

/// `cache == nullptr` selects the inference-mode derivative (fixed statistics).
template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out,
                                     const BatchNormParams<T>& p, const BatchNormCache<T>* cache);

// ---- elementwise / pooling ------------------------------------------------

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> maxpool_forward(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride,
                               std::vector<std::uint32_t>* argmax);
template <typename T>
BasicTensor<T> maxpool_backward(const Shape& input_shape, const BasicTensor<T>& grad_out,
                                const std::vector<std::uint32_t>& argmax);

template <typename T>
BasicTensor<T> avgpool_forward(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride);
template <typename T>
BasicTensor<T> avgpool_backward(const Shape& input_shape, const BasicTensor<T>& grad_out,
                                std::size_t kernel, std::size_t stride);

/// [N,C,H,W] -> [N,C,1,1]
template <typename T>
BasicTensor<T> global_avgpool_forward(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> global_avgpool_backward(const Shape& input_shape, const BasicTensor<T>& grad_out);

/// Flattens everything after the batch axis; weights are [out, in].
template <typename T>
BasicTensor<T> dense_forward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                             const BasicTensor<T>* bias);

template <typename T>
struct DenseGrads {
  BasicTensor<T> input;
  BasicTensor<T> weights;
  BasicTensor<T> bias;
};

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& x, const BasicTensor<T>& weights,
                             const BasicTensor<T>& grad_out, bool want_bias_grad);

template <typename T>
BasicTensor<T> add_forward(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Parameter-free residual downsampling: spatial subsampling by `stride` and
/// zero channels around the input channels (input lands at `pad_front`).
template <typename T>
BasicTensor<T> shortcut_pad_forward(const BasicTensor<T>& x, std::size_t stride,
                                    std::size_t out_channels, std::size_t pad_front);
template <typename T>
BasicTensor<T> shortcut_pad_backward(const Shape& input_shape, const BasicTensor<T>& grad_out,
                                     std::size_t stride, std::size_t pad_front);

/// Softmax over axis 1 of an [N, K] (or [N, K, 1, 1]) tensor.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

}  // namespace fprune::ops
