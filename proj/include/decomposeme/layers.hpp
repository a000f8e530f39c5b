#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "decomposeme/ops.hpp"
#include "decomposeme/tensor.hpp"

namespace decomposeme {

enum class Nonlinearity { relu, tanh, identity };

/// Which 1D stage runs first. vertical_first is the default; the transposed
/// order covers the horizontal-then-vertical variants.
enum class KernelOrder { vertical_first, horizontal_first };

std::string to_string(Nonlinearity nl);
Nonlinearity parse_nonlinearity(const std::string& s);

Tensor apply_nonlinearity(Nonlinearity nl, const Tensor& x);
/// Backward through nl given the forward *output*.
Tensor nonlinearity_backward(Nonlinearity nl, const Tensor& output,
                             const Tensor& grad_out);

/// Two 1D conv stages with a pointwise nonlinearity after each:
///   out = nl(b_h + horizontal * nl(b_v + vertical * in))
/// In vertical_first order `vertical` is (L, C, d, 1) and carries b_v, and
/// `horizontal` is (F, L, 1, d) and carries b_h. horizontal_first swaps the
/// roles: horizontal is (L, C, 1, d) with the intermediate bias and vertical
/// is (F, L, d, 1) with the output bias.
struct DecomposedLayer {
  KernelBank2D vertical;
  KernelBank2D horizontal;
  Nonlinearity nonlinearity = Nonlinearity::relu;
  KernelOrder order = KernelOrder::vertical_first;
  int stride = 1;
  int padding = 0;
  // Optional batch norm on the intermediate activation, before nl.
  std::optional<BatchNormParams> mid_norm;

  /// Zero weights and biases with the stage geometries set up so the output
  /// extent matches a d x d conv with the same stride and padding. A
  /// non-negative kernel_w gives the horizontal stage a different length.
  static DecomposedLayer zeros(int channels, int width, int filters, int kernel,
                               Nonlinearity nl = Nonlinearity::relu,
                               int stride = 1, int padding = 0,
                               KernelOrder order = KernelOrder::vertical_first,
                               int kernel_w = -1);

  const KernelBank2D& first() const;
  const KernelBank2D& second() const;
  KernelBank2D& first();
  KernelBank2D& second();

  int channels() const { return first().channels(); }
  int width() const { return first().filters(); }  // L
  int filters() const { return second().filters(); }
  int kernel() const;

  void validate() const;
};

struct DecomposedCache {
  Tensor intermediate;  // after nl (and mid_norm, if any)
  Tensor output;        // after nl
  std::optional<BatchNormCache> norm;
};

struct DecomposedForward {
  Tensor output;
  DecomposedCache cache;
};

DecomposedForward decomposed_forward(const Tensor& input, DecomposedLayer& layer,
                                     Mode mode = Mode::infer,
                                     const Exec& exec = {});

/// Convenience for callers that do not need the cache; infer mode.
Tensor decomposed_apply(const Tensor& input, const DecomposedLayer& layer,
                        const Exec& exec = {});

struct DecomposedGrads {
  Tensor input;
  Tensor vertical;
  Tensor horizontal;
  Tensor bias_v;  // intermediate bias, whichever stage runs first
  Tensor bias_h;  // output bias
  Tensor norm_gamma;
  Tensor norm_beta;
};

DecomposedGrads decomposed_backward(const Tensor& input,
                                    const DecomposedLayer& layer,
                                    const DecomposedCache& cache,
                                    const Tensor& grad_out,
                                    const Exec& exec = {},
                                    bool want_input_grad = true);

enum class LayerKind {
  conv2d,
  decomposed,
  relu,
  tanh,
  maxpool,
  batchnorm,
  linear,
  avgpool_global
};

std::string to_string(LayerKind k);

/// Declarative description of one layer. Fields not used by a kind stay at
/// their defaults.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int in = 0;      // conv2d / decomposed input channels
  int out = 0;     // conv2d / decomposed filters, linear units
  int kernel = 0;  // conv2d / decomposed d, maxpool window
  int width = 0;   // decomposed L
  int stride = 1;
  int pad = 0;
  Nonlinearity nl = Nonlinearity::relu;  // decomposed only
  KernelOrder order = KernelOrder::vertical_first;
  bool mid_norm = false;

  static LayerSpec conv2d(int in, int out, int k, int stride = 1, int pad = 0);
  static LayerSpec decomposed(int in, int width, int out, int k,
                              Nonlinearity nl = Nonlinearity::relu,
                              int stride = 1, int pad = 0);
  static LayerSpec maxpool(int k, int stride);
  static LayerSpec linear(int units);
  static LayerSpec activation(LayerKind k);
  static LayerSpec batchnorm();
  static LayerSpec avgpool_global();

  bool is_conv_like() const {
    return kind == LayerKind::conv2d || kind == LayerKind::decomposed;
  }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Output extent of one layer for a single sample of extent `input` (n ignored).
/// Throws ValidationError when the layer cannot consume that input.
Shape layer_output_shape(const LayerSpec& spec, const Shape& input);

/// Trainable parameter count; `input` is needed for layers whose size is
/// inferred from the chain (linear, batchnorm).
long long param_count(const LayerSpec& spec, const Shape& input);
long long param_count(const DecomposedLayer& layer);

/// A named parameter array. `dims` is the logical extent written to weight
/// files (vectors are rank 1, linear weights rank 2).
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
  bool trainable = true;
  bool decay = true;
  std::vector<std::uint32_t> dims;
};

/// Runtime layer: forward caches what backward needs; backward overwrites the
/// parameter gradients and returns the input gradient.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual std::vector<ParamRef> tensors() { return {}; }
  virtual LayerKind kind() const = 0;
  void set_exec(const Exec& exec) { exec_ = exec; }
  /// When false, conv-like layers skip the input gradient and backward
  /// returns an empty tensor.
  void set_input_grad(bool on) { input_grad_ = on; }

 protected:
  Exec exec_;
  bool input_grad_ = true;
};

class Conv2dLayer final : public Layer {
 public:
  explicit Conv2dLayer(KernelBank2D bank);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<ParamRef> tensors() override;
  LayerKind kind() const override { return LayerKind::conv2d; }
  KernelBank2D& bank() { return bank_; }

 private:
  KernelBank2D bank_;
  Tensor grad_w_, grad_b_, input_;
};

class DecomposedModule final : public Layer {
 public:
  explicit DecomposedModule(DecomposedLayer layer);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<ParamRef> tensors() override;
  LayerKind kind() const override { return LayerKind::decomposed; }
  DecomposedLayer& layer() { return layer_; }

 private:
  DecomposedLayer layer_;
  DecomposedCache cache_;
  Tensor input_;
  Tensor grad_v_, grad_h_, grad_bv_, grad_bh_, grad_gamma_, grad_beta_;
};

class ActivationLayer final : public Layer {
 public:
  explicit ActivationLayer(Nonlinearity nl) : nl_(nl) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  LayerKind kind() const override {
    return nl_ == Nonlinearity::tanh ? LayerKind::tanh : LayerKind::relu;
  }

 private:
  Nonlinearity nl_;
  Tensor output_;
};

class MaxPoolLayer final : public Layer {
 public:
  MaxPoolLayer(int window, int stride) : window_(window), stride_(stride) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  LayerKind kind() const override { return LayerKind::maxpool; }

 private:
  int window_, stride_;
  Shape input_shape_{};
  std::vector<std::uint32_t> argmax_;
};

class BatchNormLayer final : public Layer {
 public:
  explicit BatchNormLayer(int channels);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<ParamRef> tensors() override;
  LayerKind kind() const override { return LayerKind::batchnorm; }
  BatchNormParams& params() { return params_; }

 private:
  BatchNormParams params_;
  BatchNormCache cache_;
  Tensor grad_gamma_, grad_beta_;
};

class LinearLayer final : public Layer {
 public:
  LinearLayer(int in, int out);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<ParamRef> tensors() override;
  LayerKind kind() const override { return LayerKind::linear; }
  Tensor& weights() { return weights_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor weights_, bias_;  // (out, in, 1, 1), (out, 1, 1, 1)
  Tensor grad_w_, grad_b_, input_;
};

class GlobalAvgPoolLayer final : public Layer {
 public:
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  LayerKind kind() const override { return LayerKind::avgpool_global; }

 private:
  Shape input_shape_{};
};

/// Builds a zero-initialised runtime layer for `spec` fed by `input`.
std::unique_ptr<Layer> make_layer(const LayerSpec& spec, const Shape& input);

}  // namespace decomposeme
