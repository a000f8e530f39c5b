#include "decomposeme/layers.hpp"

#include "decomposeme/error.hpp"

namespace decomposeme {

std::string to_string(Nonlinearity nl) {
  switch (nl) {
    case Nonlinearity::relu: return "relu";
    case Nonlinearity::tanh: return "tanh";
    case Nonlinearity::identity: return "identity";
  }
  return "?";
}

Nonlinearity parse_nonlinearity(const std::string& s) {
  if (s == "relu") return Nonlinearity::relu;
  if (s == "tanh") return Nonlinearity::tanh;
  if (s == "identity") return Nonlinearity::identity;
  throw ParseError("unknown nonlinearity '" + s + "' (relu|tanh|identity)");
}

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::decomposed: return "decomposed";
    case LayerKind::relu: return "relu";
    case LayerKind::tanh: return "tanh";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::linear: return "linear";
    case LayerKind::avgpool_global: return "avgpool_global";
  }
  return "?";
}

Tensor apply_nonlinearity(Nonlinearity nl, const Tensor& x) {
  switch (nl) {
    case Nonlinearity::relu: return relu(x);
    case Nonlinearity::tanh: return tanh_forward(x);
    case Nonlinearity::identity: return x;
  }
  return x;
}

Tensor nonlinearity_backward(Nonlinearity nl, const Tensor& output,
                             const Tensor& grad_out) {
  switch (nl) {
    // relu(x) > 0 exactly when x > 0, so the output carries the mask.
    case Nonlinearity::relu: return relu_backward(output, grad_out);
    case Nonlinearity::tanh: return tanh_backward(output, grad_out);
    case Nonlinearity::identity: return grad_out;
  }
  return grad_out;
}

// ---------------------------------------------------------------------------
// DecomposedLayer

DecomposedLayer DecomposedLayer::zeros(int channels, int width, int filters,
                                       int kernel, Nonlinearity nl, int stride,
                                       int padding, KernelOrder order,
                                       int kernel_w) {
  if (kernel_w < 0) kernel_w = kernel;
  if (channels < 1 || width < 1 || filters < 1 || kernel < 1 || kernel_w < 1) {
    throw ConfigError("decomposed layer needs C, L, F, d >= 1");
  }
  const ConvGeometry along_h{stride, 1, padding, 0};
  const ConvGeometry along_w{1, stride, 0, padding};
  DecomposedLayer d;
  d.nonlinearity = nl;
  d.order = order;
  d.stride = stride;
  d.padding = padding;
  if (order == KernelOrder::vertical_first) {
    d.vertical = KernelBank2D::zeros(width, channels, kernel, 1, along_h);
    d.horizontal = KernelBank2D::zeros(filters, width, 1, kernel_w, along_w);
  } else {
    d.horizontal = KernelBank2D::zeros(width, channels, 1, kernel_w, along_w);
    d.vertical = KernelBank2D::zeros(filters, width, kernel, 1, along_h);
  }
  return d;
}

const KernelBank2D& DecomposedLayer::first() const {
  return order == KernelOrder::vertical_first ? vertical : horizontal;
}
const KernelBank2D& DecomposedLayer::second() const {
  return order == KernelOrder::vertical_first ? horizontal : vertical;
}
KernelBank2D& DecomposedLayer::first() {
  return order == KernelOrder::vertical_first ? vertical : horizontal;
}
KernelBank2D& DecomposedLayer::second() {
  return order == KernelOrder::vertical_first ? horizontal : vertical;
}

int DecomposedLayer::kernel() const { return vertical.kernel_h(); }

void DecomposedLayer::validate() const {
  vertical.validate();
  horizontal.validate();
  if (vertical.kernel_w() != 1 || horizontal.kernel_h() != 1) {
    throw ConfigError("decomposed layer: vertical bank must be d x 1 and "
                      "horizontal bank 1 x d");
  }
  if (second().channels() != first().filters()) {
    throw DimensionError("decomposed layer: second stage reads " +
                         std::to_string(second().channels()) +
                         " channels but the first produces " +
                         std::to_string(first().filters()));
  }
  if (mid_norm && mid_norm->channels() != first().filters()) {
    throw DimensionError("decomposed layer: intermediate norm has " +
                         std::to_string(mid_norm->channels()) + " channels, L is " +
                         std::to_string(first().filters()));
  }
}

namespace {

DecomposedForward forward_impl(const Tensor& input, const DecomposedLayer& layer,
                               BatchNormParams* norm, Mode mode,
                               const Exec& exec) {
  layer.validate();
  DecomposedForward r;
  Tensor mid = conv2d(input, layer.first(), exec);
  if (norm != nullptr) {
    BatchNormCache nc;
    mid = batchnorm(mid, *norm, mode, &nc);
    r.cache.norm = std::move(nc);
  }
  r.cache.intermediate = apply_nonlinearity(layer.nonlinearity, mid);
  r.output = apply_nonlinearity(layer.nonlinearity,
                                conv2d(r.cache.intermediate, layer.second(), exec));
  r.cache.output = r.output;
  return r;
}

}  // namespace

DecomposedForward decomposed_forward(const Tensor& input, DecomposedLayer& layer,
                                     Mode mode, const Exec& exec) {
  BatchNormParams* norm = layer.mid_norm ? &*layer.mid_norm : nullptr;
  return forward_impl(input, layer, norm, mode, exec);
}

Tensor decomposed_apply(const Tensor& input, const DecomposedLayer& layer,
                        const Exec& exec) {
  std::optional<BatchNormParams> norm = layer.mid_norm;
  return forward_impl(input, layer, norm ? &*norm : nullptr, Mode::infer, exec)
      .output;
}

DecomposedGrads decomposed_backward(const Tensor& input,
                                    const DecomposedLayer& layer,
                                    const DecomposedCache& cache,
                                    const Tensor& grad_out, const Exec& exec,
                                    bool want_input_grad) {
  if (!(grad_out.shape() == cache.output.shape())) {
    throw DimensionError("decomposed_backward: grad_out is " +
                         to_string(grad_out.shape()) + ", forward produced " +
                         to_string(cache.output.shape()));
  }
  const Tensor g2 = nonlinearity_backward(layer.nonlinearity, cache.output, grad_out);
  Conv2dGrads s2 = conv2d_backward(cache.intermediate, layer.second(), g2, exec);
  Tensor g1 = nonlinearity_backward(layer.nonlinearity, cache.intermediate, s2.input);
  DecomposedGrads r;
  if (layer.mid_norm) {
    if (!cache.norm) throw InputError("decomposed_backward: missing norm cache");
    BatchNormGrads ng = batchnorm_backward(*cache.norm, *layer.mid_norm, g1);
    g1 = std::move(ng.input);
    r.norm_gamma = std::move(ng.gamma);
    r.norm_beta = std::move(ng.beta);
  }
  Conv2dGrads s1 = conv2d_backward(input, layer.first(), g1, exec, want_input_grad);
  r.input = std::move(s1.input);
  r.bias_v = std::move(s1.bias);
  r.bias_h = std::move(s2.bias);
  if (layer.order == KernelOrder::vertical_first) {
    r.vertical = std::move(s1.weights);
    r.horizontal = std::move(s2.weights);
  } else {
    r.horizontal = std::move(s1.weights);
    r.vertical = std::move(s2.weights);
  }
  return r;
}

long long param_count(const DecomposedLayer& layer) {
  long long n = static_cast<long long>(layer.vertical.weights.size() +
                                       layer.vertical.bias.size() +
                                       layer.horizontal.weights.size() +
                                       layer.horizontal.bias.size());
  if (layer.mid_norm) n += 2LL * layer.mid_norm->channels();
  return n;
}

// ---------------------------------------------------------------------------
// LayerSpec

LayerSpec LayerSpec::conv2d(int in, int out, int k, int stride, int pad) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.in = in;
  s.out = out;
  s.kernel = k;
  s.stride = stride;
  s.pad = pad;
  return s;
}

LayerSpec LayerSpec::decomposed(int in, int width, int out, int k,
                                Nonlinearity nl, int stride, int pad) {
  LayerSpec s = conv2d(in, out, k, stride, pad);
  s.kind = LayerKind::decomposed;
  s.width = width;
  s.nl = nl;
  return s;
}

LayerSpec LayerSpec::maxpool(int k, int stride) {
  LayerSpec s;
  s.kind = LayerKind::maxpool;
  s.kernel = k;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::linear(int units) {
  LayerSpec s;
  s.kind = LayerKind::linear;
  s.out = units;
  return s;
}

LayerSpec LayerSpec::activation(LayerKind k) {
  LayerSpec s;
  s.kind = k;
  return s;
}

LayerSpec LayerSpec::batchnorm() { return activation(LayerKind::batchnorm); }
LayerSpec LayerSpec::avgpool_global() {
  return activation(LayerKind::avgpool_global);
}

Shape layer_output_shape(const LayerSpec& spec, const Shape& input) {
  const Shape in{1, input.c, input.h, input.w};
  switch (spec.kind) {
    case LayerKind::conv2d:
    case LayerKind::decomposed: {
      if (spec.in != in.c) {
        throw ValidationError(to_string(spec.kind) + " expects " +
                              std::to_string(spec.in) + " input channels, chain provides " +
                              std::to_string(in.c));
      }
      auto extent = [&](int size) {
        const int span = size + 2 * spec.pad - spec.kernel;
        if (span < 0 || span % spec.stride != 0) {
          throw ValidationError(to_string(spec.kind) + " k=" +
                                std::to_string(spec.kernel) + " stride=" +
                                std::to_string(spec.stride) + " pad=" +
                                std::to_string(spec.pad) +
                                " gives a non-integral output on extent " +
                                std::to_string(size));
        }
        return span / spec.stride + 1;
      };
      return {input.n, spec.out, extent(in.h), extent(in.w)};
    }
    case LayerKind::maxpool: {
      try {
        Shape s = maxpool_output_shape(in, spec.kernel, spec.stride);
        s.n = input.n;
        return s;
      } catch (const ConfigError& e) {
        throw ValidationError(e.what());
      }
    }
    case LayerKind::linear: return {input.n, spec.out, 1, 1};
    case LayerKind::avgpool_global: return {input.n, input.c, 1, 1};
    case LayerKind::relu:
    case LayerKind::tanh:
    case LayerKind::batchnorm: return input;
  }
  return input;
}

long long param_count(const LayerSpec& spec, const Shape& input) {
  const long long c = spec.in, f = spec.out, d = spec.kernel, l = spec.width;
  switch (spec.kind) {
    case LayerKind::conv2d: return c * f * d * d + f;
    case LayerKind::decomposed:
      return l * c * d + l + f * l * d + f + (spec.mid_norm ? 2 * l : 0);
    case LayerKind::linear:
      return static_cast<long long>(input.sample_size()) * f + f;
    case LayerKind::batchnorm: return 2LL * input.c;
    default: return 0;
  }
}

// ---------------------------------------------------------------------------
// Runtime layers

Conv2dLayer::Conv2dLayer(KernelBank2D bank) : bank_(std::move(bank)) {
  bank_.validate();
  grad_w_ = Tensor(bank_.weights.shape());
  grad_b_ = Tensor(bank_.bias.shape());
}

Tensor Conv2dLayer::forward(const Tensor& x, Mode mode) {
  if (mode == Mode::train) input_ = x;
  return conv2d(x, bank_, exec_);
}

Tensor Conv2dLayer::backward(const Tensor& grad_out) {
  Conv2dGrads g = conv2d_backward(input_, bank_, grad_out, exec_, input_grad_);
  grad_w_ = std::move(g.weights);
  grad_b_ = std::move(g.bias);
  return std::move(g.input);
}

namespace {

std::vector<std::uint32_t> dims4(const Shape& s) {
  return {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
          static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
}
std::vector<std::uint32_t> dims1(const Tensor& t) {
  return {static_cast<std::uint32_t>(t.size())};
}

}  // namespace

std::vector<ParamRef> Conv2dLayer::tensors() {
  return {{"weight", &bank_.weights, &grad_w_, true, true, dims4(bank_.weights.shape())},
          {"bias", &bank_.bias, &grad_b_, true, false, dims1(bank_.bias)}};
}

DecomposedModule::DecomposedModule(DecomposedLayer layer) : layer_(std::move(layer)) {
  layer_.validate();
  grad_v_ = Tensor(layer_.vertical.weights.shape());
  grad_h_ = Tensor(layer_.horizontal.weights.shape());
  grad_bv_ = Tensor(layer_.first().bias.shape());
  grad_bh_ = Tensor(layer_.second().bias.shape());
  if (layer_.mid_norm) {
    grad_gamma_ = Tensor(layer_.mid_norm->gamma.shape());
    grad_beta_ = Tensor(layer_.mid_norm->beta.shape());
  }
}

Tensor DecomposedModule::forward(const Tensor& x, Mode mode) {
  DecomposedForward r = decomposed_forward(x, layer_, mode, exec_);
  if (mode == Mode::train) {
    input_ = x;
    cache_ = std::move(r.cache);
  }
  return std::move(r.output);
}

Tensor DecomposedModule::backward(const Tensor& grad_out) {
  DecomposedGrads g =
      decomposed_backward(input_, layer_, cache_, grad_out, exec_, input_grad_);
  grad_v_ = std::move(g.vertical);
  grad_h_ = std::move(g.horizontal);
  grad_bv_ = std::move(g.bias_v);
  grad_bh_ = std::move(g.bias_h);
  if (layer_.mid_norm) {
    grad_gamma_ = std::move(g.norm_gamma);
    grad_beta_ = std::move(g.norm_beta);
  }
  return std::move(g.input);
}

std::vector<ParamRef> DecomposedModule::tensors() {
  std::vector<ParamRef> t{
      {"vertical", &layer_.vertical.weights, &grad_v_, true, true,
       dims4(layer_.vertical.weights.shape())},
      {"horizontal", &layer_.horizontal.weights, &grad_h_, true, true,
       dims4(layer_.horizontal.weights.shape())},
      {"bias_v", &layer_.first().bias, &grad_bv_, true, false, dims1(layer_.first().bias)},
      {"bias_h", &layer_.second().bias, &grad_bh_, true, false, dims1(layer_.second().bias)}};
  if (layer_.mid_norm) {
    BatchNormParams& p = *layer_.mid_norm;
    t.push_back({"norm_gamma", &p.gamma, &grad_gamma_, true, false, dims1(p.gamma)});
    t.push_back({"norm_beta", &p.beta, &grad_beta_, true, false, dims1(p.beta)});
    t.push_back({"norm_mean", &p.running_mean, nullptr, false, false, dims1(p.running_mean)});
    t.push_back({"norm_var", &p.running_var, nullptr, false, false, dims1(p.running_var)});
  }
  return t;
}

Tensor ActivationLayer::forward(const Tensor& x, Mode mode) {
  Tensor y = apply_nonlinearity(nl_, x);
  if (mode == Mode::train) output_ = y;
  return y;
}

Tensor ActivationLayer::backward(const Tensor& grad_out) {
  return nonlinearity_backward(nl_, output_, grad_out);
}

Tensor MaxPoolLayer::forward(const Tensor& x, Mode mode) {
  MaxPoolResult r = maxpool(x, window_, stride_);
  if (mode == Mode::train) {
    input_shape_ = x.shape();
    argmax_ = std::move(r.argmax);
  }
  return std::move(r.output);
}

Tensor MaxPoolLayer::backward(const Tensor& grad_out) {
  return maxpool_backward(input_shape_, argmax_, grad_out);
}

BatchNormLayer::BatchNormLayer(int channels)
    : params_(BatchNormParams::identity(channels)),
      grad_gamma_(Tensor::vector(channels)),
      grad_beta_(Tensor::vector(channels)) {}

Tensor BatchNormLayer::forward(const Tensor& x, Mode mode) {
  return batchnorm(x, params_, mode, mode == Mode::train ? &cache_ : nullptr);
}

Tensor BatchNormLayer::backward(const Tensor& grad_out) {
  BatchNormGrads g = batchnorm_backward(cache_, params_, grad_out);
  grad_gamma_ = std::move(g.gamma);
  grad_beta_ = std::move(g.beta);
  return std::move(g.input);
}

std::vector<ParamRef> BatchNormLayer::tensors() {
  return {{"gamma", &params_.gamma, &grad_gamma_, true, false, dims1(params_.gamma)},
          {"beta", &params_.beta, &grad_beta_, true, false, dims1(params_.beta)},
          {"running_mean", &params_.running_mean, nullptr, false, false,
           dims1(params_.running_mean)},
          {"running_var", &params_.running_var, nullptr, false, false,
           dims1(params_.running_var)}};
}

LinearLayer::LinearLayer(int in, int out)
    : weights_({out, in, 1, 1}),
      bias_(Tensor::vector(out)),
      grad_w_({out, in, 1, 1}),
      grad_b_(Tensor::vector(out)) {}

Tensor LinearLayer::forward(const Tensor& x, Mode mode) {
  if (mode == Mode::train) input_ = x;
  return linear(x, weights_, bias_, exec_);
}

Tensor LinearLayer::backward(const Tensor& grad_out) {
  LinearGrads g = linear_backward(input_, weights_, grad_out, exec_);
  grad_w_ = std::move(g.weights);
  grad_b_ = std::move(g.bias);
  return std::move(g.input);
}

std::vector<ParamRef> LinearLayer::tensors() {
  const auto out = static_cast<std::uint32_t>(weights_.shape().n);
  const auto in = static_cast<std::uint32_t>(weights_.shape().c);
  return {{"weight", &weights_, &grad_w_, true, true, {out, in}},
          {"bias", &bias_, &grad_b_, true, false, dims1(bias_)}};
}

Tensor GlobalAvgPoolLayer::forward(const Tensor& x, Mode mode) {
  if (mode == Mode::train) input_shape_ = x.shape();
  return global_avgpool(x);
}

Tensor GlobalAvgPoolLayer::backward(const Tensor& grad_out) {
  return global_avgpool_backward(input_shape_, grad_out);
}

std::unique_ptr<Layer> make_layer(const LayerSpec& spec, const Shape& input) {
  switch (spec.kind) {
    case LayerKind::conv2d:
      return std::make_unique<Conv2dLayer>(KernelBank2D::zeros(
          spec.out, spec.in, spec.kernel, spec.kernel,
          ConvGeometry::square(spec.stride, spec.pad)));
    case LayerKind::decomposed: {
      DecomposedLayer d = DecomposedLayer::zeros(spec.in, spec.width, spec.out,
                                                 spec.kernel, spec.nl, spec.stride,
                                                 spec.pad, spec.order);
      if (spec.mid_norm) d.mid_norm = BatchNormParams::identity(spec.width);
      return std::make_unique<DecomposedModule>(std::move(d));
    }
    case LayerKind::relu: return std::make_unique<ActivationLayer>(Nonlinearity::relu);
    case LayerKind::tanh: return std::make_unique<ActivationLayer>(Nonlinearity::tanh);
    case LayerKind::maxpool: return std::make_unique<MaxPoolLayer>(spec.kernel, spec.stride);
    case LayerKind::batchnorm: return std::make_unique<BatchNormLayer>(input.c);
    case LayerKind::linear:
      return std::make_unique<LinearLayer>(static_cast<int>(input.sample_size()), spec.out);
    case LayerKind::avgpool_global: return std::make_unique<GlobalAvgPoolLayer>();
  }
  throw ConfigError("make_layer: unknown layer kind");
}

}  // namespace decomposeme
