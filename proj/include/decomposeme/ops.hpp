#pragma once

// Forward and backward kernels for every primitive layer. All functions are
// pure with respect to their inputs except batchnorm in train mode, which
// updates the running statistics it is handed.

#include <cstdint>
#include <span>
#include <vector>

#include "decomposeme/tensor.hpp"

namespace decomposeme {

/// Accumulator width used inside GEMM-backed reductions. f64 is the reference
/// mode; f32 trades a few ulps for roughly twice the throughput.
enum class Precision { f64, f32 };

struct Exec {
  int threads = 1;
  Precision precision = Precision::f64;
};

enum class Mode { train, infer };

struct ConvGeometry {
  int stride_h = 1;
  int stride_w = 1;
  int pad_h = 0;
  int pad_w = 0;

  static ConvGeometry square(int stride, int pad) {
    return {stride, stride, pad, pad};
  }
  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

/// Weights of one conv layer: F filters over C planes of d_v x d_h, plus bias.
struct KernelBank2D {
  Tensor weights;  // (F, C, d_v, d_h)
  Tensor bias;     // (F, 1, 1, 1)
  ConvGeometry geometry;

  static KernelBank2D zeros(int filters, int channels, int kernel_h,
                            int kernel_w, ConvGeometry geometry = {});

  int filters() const { return weights.shape().n; }
  int channels() const { return weights.shape().c; }
  int kernel_h() const { return weights.shape().h; }
  int kernel_w() const { return weights.shape().w; }

  /// Throws ConfigError when extents or geometry are out of range.
  void validate() const;
};

Shape conv2d_output_shape(const Shape& input, const KernelBank2D& bank);

/// Cross-correlation (no kernel flip) plus per-filter bias.
Tensor conv2d(const Tensor& input, const KernelBank2D& bank,
              const Exec& exec = {});

struct Conv2dGrads {
  Tensor input;    // empty when not requested
  Tensor weights;  // same shape as bank.weights
  Tensor bias;     // (F,1,1,1)
};

Conv2dGrads conv2d_backward(const Tensor& input, const KernelBank2D& bank,
                            const Tensor& grad_out, const Exec& exec = {},
                            bool want_input_grad = true);

Tensor relu(const Tensor& input);
/// Passes grad where input > 0; the gradient at exactly 0 is 0.
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

Tensor tanh_forward(const Tensor& input);
/// Takes the forward *output* y and uses 1 - y^2.
Tensor tanh_backward(const Tensor& output, const Tensor& grad_out);

struct MaxPoolResult {
  Tensor output;
  std::vector<std::uint32_t> argmax;  // flat input offset per output element
};

Shape maxpool_output_shape(const Shape& input, int window, int stride);
/// Ties go to the first element in scan order.
MaxPoolResult maxpool(const Tensor& input, int window, int stride);
Tensor maxpool_backward(const Shape& input_shape,
                        std::span<const std::uint32_t> argmax,
                        const Tensor& grad_out);

Tensor global_avgpool(const Tensor& input);
Tensor global_avgpool_backward(const Shape& input_shape,
                               const Tensor& grad_out);

/// Per-sample affine map on the flattened input. weights is (out, in, 1, 1).
Tensor linear(const Tensor& input, const Tensor& weights, const Tensor& bias,
              const Exec& exec = {});

struct LinearGrads {
  Tensor input;    // same shape as the forward input
  Tensor weights;  // (out, in, 1, 1)
  Tensor bias;     // (out, 1, 1, 1)
};

LinearGrads linear_backward(const Tensor& input, const Tensor& weights,
                            const Tensor& grad_out, const Exec& exec = {});

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;

  /// gamma = 1, beta = 0, running stats (0, 1).
  static BatchNormParams identity(int channels);
  int channels() const { return static_cast<int>(gamma.size()); }
};

struct BatchNormCache {
  Mode mode = Mode::infer;
  Tensor normalized;            // x-hat
  std::vector<double> inv_std;  // per channel
};

/// Train mode normalises with batch statistics (biased variance) and folds
/// them into the running stats with momentum (unbiased variance); infer mode
/// reads the running stats.
Tensor batchnorm(const Tensor& input, BatchNormParams& params, Mode mode,
                 BatchNormCache* cache = nullptr);

struct BatchNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

BatchNormGrads batchnorm_backward(const BatchNormCache& cache,
                                  const BatchNormParams& params,
                                  const Tensor& grad_out);

struct LossResult {
  double loss = 0.0;
  Tensor grad_logits;
};

/// Mean over the batch of -log softmax(logits)[label]. logits is (N, K, ...)
/// flattened per sample.
LossResult softmax_cross_entropy(const Tensor& logits,
                                 std::span<const int> labels);

}  // namespace decomposeme
