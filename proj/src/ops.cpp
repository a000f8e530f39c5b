#include "decomposeme/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "decomposeme/error.hpp"
#include "decomposeme/parallel.hpp"

namespace decomposeme {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

Eigen::Map<Eigen::ArrayXf> array_of(Tensor& t) {
  return {t.raw(), static_cast<Eigen::Index>(t.size())};
}
Eigen::Map<const Eigen::ArrayXf> array_of(const Tensor& t) {
  return {t.raw(), static_cast<Eigen::Index>(t.size())};
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (!(a == b)) {
    throw DimensionError(std::string(op) + ": shape " + to_string(a) +
                         " does not match " + to_string(b));
  }
}

std::size_t linear_in(const Tensor& input, const Tensor& weights) {
  const std::size_t in = input.shape().sample_size();
  if (in != static_cast<std::size_t>(weights.shape().c)) {
    throw DimensionError("linear: per-sample input length " +
                         std::to_string(in) + " but weights expect " +
                         std::to_string(weights.shape().c));
  }
  return in;
}

template <class T>
Tensor linear_impl(const Tensor& input, const Tensor& weights,
                   const Tensor& bias, const Exec& exec) {
  const int n = input.shape().n;
  const int out = weights.shape().n;
  const auto in = static_cast<Eigen::Index>(linear_in(input, weights));
  const RowMat<T> w = ConstMatMap<float>(weights.raw(), out, in).template cast<T>();
  Tensor y({n, out, 1, 1});
  run_chunks(n, exec.threads, [&](int, int begin, int end) {
    if (begin == end) return;
    const RowMat<T> x =
        ConstMatMap<float>(input.raw() + begin * in, end - begin, in).template cast<T>();
    const RowMat<T> r = x * w.transpose();
    for (int s = begin; s < end; ++s) {
      for (int o = 0; o < out; ++o) {
        y[static_cast<std::size_t>(s) * out + o] =
            static_cast<float>(r(s - begin, o) + static_cast<T>(bias[o]));
      }
    }
  });
  return y;
}

template <class T>
LinearGrads linear_backward_impl(const Tensor& input, const Tensor& weights,
                                 const Tensor& grad_out, const Exec& exec) {
  const int n = input.shape().n;
  const int out = weights.shape().n;
  const auto in = static_cast<Eigen::Index>(linear_in(input, weights));
  if (grad_out.shape().n != n || grad_out.shape().sample_size() != static_cast<std::size_t>(out)) {
    throw DimensionError("linear_backward: grad_out is " +
                         to_string(grad_out.shape()) + ", expected " +
                         std::to_string(n) + "x" + std::to_string(out));
  }
  const RowMat<T> w = ConstMatMap<float>(weights.raw(), out, in).template cast<T>();
  const int chunks = chunk_count(n, exec.threads);
  std::vector<RowMat<T>> dw(chunks, RowMat<T>::Zero(out, in));
  std::vector<std::vector<double>> db(chunks, std::vector<double>(out, 0.0));
  LinearGrads grads;
  grads.input = Tensor(input.shape());
  run_chunks(n, exec.threads, [&](int chunk, int begin, int end) {
    if (begin == end) return;
    const RowMat<T> x =
        ConstMatMap<float>(input.raw() + begin * in, end - begin, in).template cast<T>();
    const RowMat<T> g =
        ConstMatMap<float>(grad_out.raw() + static_cast<std::size_t>(begin) * out,
                           end - begin, out).template cast<T>();
    dw[chunk].noalias() += g.transpose() * x;
    for (int s = 0; s < end - begin; ++s) {
      for (int o = 0; o < out; ++o) db[chunk][o] += static_cast<double>(g(s, o));
    }
    const RowMat<T> dx = g * w;
    float* dst = grads.input.raw() + begin * in;
    for (Eigen::Index i = 0; i < dx.size(); ++i) dst[i] = static_cast<float>(dx.data()[i]);
  });
  for (int k = 1; k < chunks; ++k) {
    dw[0] += dw[k];
    for (int o = 0; o < out; ++o) db[0][o] += db[k][o];
  }
  grads.weights = Tensor(weights.shape());
  Eigen::Map<RowMat<float>>(grads.weights.raw(), out, in) = dw[0].template cast<float>();
  grads.bias = Tensor::vector(out);
  for (int o = 0; o < out; ++o) grads.bias[o] = static_cast<float>(db[0][o]);
  return grads;
}

}  // namespace

Tensor relu(const Tensor& input) {
  Tensor out(input.shape());
  array_of(out) = array_of(input).max(0.0f);
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_out) {
  require_same(input.shape(), grad_out.shape(), "relu_backward");
  Tensor g(input.shape());
  array_of(g) = (array_of(input) > 0.0f).select(array_of(grad_out), 0.0f);
  return g;
}

Tensor tanh_forward(const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = std::tanh(input[i]);
  return out;
}

Tensor tanh_backward(const Tensor& output, const Tensor& grad_out) {
  require_same(output.shape(), grad_out.shape(), "tanh_backward");
  Tensor g(output.shape());
  const auto y = array_of(output);
  array_of(g) = array_of(grad_out) * (1.0f - y * y);
  return g;
}

Shape maxpool_output_shape(const Shape& input, int window, int stride) {
  if (window < 1 || stride < 1) {
    throw ConfigError("maxpool: window and stride must be positive");
  }
  auto extent = [&](int size, const char* axis) {
    const int span = size - window;
    if (span < 0 || span % stride != 0) {
      throw ConfigError(std::string("maxpool: non-integral output along ") +
                        axis + " (size " + std::to_string(size) + ", window " +
                        std::to_string(window) + ", stride " +
                        std::to_string(stride) + ")");
    }
    return span / stride + 1;
  };
  return {input.n, input.c, extent(input.h, "H"), extent(input.w, "W")};
}

MaxPoolResult maxpool(const Tensor& input, int window, int stride) {
  const Shape in = input.shape();
  const Shape os = maxpool_output_shape(in, window, stride);
  MaxPoolResult r{Tensor(os), std::vector<std::uint32_t>(os.numel())};
  std::size_t o = 0;
  for (int n = 0; n < in.n; ++n) {
    for (int c = 0; c < in.c; ++c) {
      for (int oy = 0; oy < os.h; ++oy) {
        for (int ox = 0; ox < os.w; ++ox, ++o) {
          std::size_t best = input.offset(n, c, oy * stride, ox * stride);
          float bv = input[best];
          for (int i = 0; i < window; ++i) {
            for (int j = 0; j < window; ++j) {
              const std::size_t idx =
                  input.offset(n, c, oy * stride + i, ox * stride + j);
              if (input[idx] > bv) {
                bv = input[idx];
                best = idx;
              }
            }
          }
          r.output[o] = bv;
          r.argmax[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return r;
}

Tensor maxpool_backward(const Shape& input_shape,
                        std::span<const std::uint32_t> argmax,
                        const Tensor& grad_out) {
  if (argmax.size() != grad_out.size()) {
    throw DimensionError("maxpool_backward: " + std::to_string(argmax.size()) +
                         " argmax entries for " +
                         std::to_string(grad_out.size()) + " gradients");
  }
  Tensor g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_out[i];
  return g;
}

Tensor global_avgpool(const Tensor& input) {
  const Shape in = input.shape();
  Tensor out({in.n, in.c, 1, 1});
  const std::size_t plane = static_cast<std::size_t>(in.h) * in.w;
  for (std::size_t nc = 0; nc < static_cast<std::size_t>(in.n) * in.c; ++nc) {
    double s = 0.0;
    for (std::size_t q = 0; q < plane; ++q) s += input[nc * plane + q];
    out[nc] = static_cast<float>(s / static_cast<double>(plane));
  }
  return out;
}

Tensor global_avgpool_backward(const Shape& input_shape, const Tensor& grad_out) {
  const Shape expect{input_shape.n, input_shape.c, 1, 1};
  require_same(grad_out.shape(), expect, "global_avgpool_backward");
  Tensor g(input_shape);
  const std::size_t plane = static_cast<std::size_t>(input_shape.h) * input_shape.w;
  for (std::size_t nc = 0; nc < grad_out.size(); ++nc) {
    const float v = static_cast<float>(grad_out[nc] / static_cast<double>(plane));
    for (std::size_t q = 0; q < plane; ++q) g[nc * plane + q] = v;
  }
  return g;
}

Tensor linear(const Tensor& input, const Tensor& weights, const Tensor& bias,
              const Exec& exec) {
  if (bias.size() != static_cast<std::size_t>(weights.shape().n)) {
    throw DimensionError("linear: bias length " + std::to_string(bias.size()) +
                         " for " + std::to_string(weights.shape().n) + " outputs");
  }
  if (exec.precision == Precision::f32) return linear_impl<float>(input, weights, bias, exec);
  return linear_impl<double>(input, weights, bias, exec);
}

LinearGrads linear_backward(const Tensor& input, const Tensor& weights,
                            const Tensor& grad_out, const Exec& exec) {
  if (exec.precision == Precision::f32) {
    return linear_backward_impl<float>(input, weights, grad_out, exec);
  }
  return linear_backward_impl<double>(input, weights, grad_out, exec);
}

BatchNormParams BatchNormParams::identity(int channels) {
  BatchNormParams p;
  p.gamma = Tensor::vector(channels, 1.0f);
  p.beta = Tensor::vector(channels, 0.0f);
  p.running_mean = Tensor::vector(channels, 0.0f);
  p.running_var = Tensor::vector(channels, 1.0f);
  return p;
}

Tensor batchnorm(const Tensor& input, BatchNormParams& params, Mode mode,
                 BatchNormCache* cache) {
  const Shape in = input.shape();
  const int c = params.channels();
  if (in.c != c || params.beta.size() != static_cast<std::size_t>(c)) {
    throw DimensionError("batchnorm: input has " + std::to_string(in.c) +
                         " channels (axis C), parameters have " +
                         std::to_string(c));
  }
  if (!(params.eps > 0.0f)) throw ConfigError("batchnorm: eps must be positive");
  const std::size_t plane = static_cast<std::size_t>(in.h) * in.w;
  const std::size_t count = plane * in.n;
  Tensor out(in);
  Tensor xhat(in);
  std::vector<double> inv_std(c);
  for (int ch = 0; ch < c; ++ch) {
    double mean, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (int n = 0; n < in.n; ++n) {
        const float* p = input.raw() + input.offset(n, ch, 0, 0);
        for (std::size_t q = 0; q < plane; ++q) s += p[q];
      }
      mean = s / static_cast<double>(count);
      double ss = 0.0;
      for (int n = 0; n < in.n; ++n) {
        const float* p = input.raw() + input.offset(n, ch, 0, 0);
        for (std::size_t q = 0; q < plane; ++q) {
          const double dlt = p[q] - mean;
          ss += dlt * dlt;
        }
      }
      var = ss / static_cast<double>(count);
      const double unbiased = count > 1 ? ss / static_cast<double>(count - 1) : var;
      const double m = params.momentum;
      params.running_mean[ch] =
          static_cast<float>((1.0 - m) * params.running_mean[ch] + m * mean);
      params.running_var[ch] =
          static_cast<float>((1.0 - m) * params.running_var[ch] + m * unbiased);
    } else {
      mean = params.running_mean[ch];
      var = params.running_var[ch];
    }
    const double istd = 1.0 / std::sqrt(var + params.eps);
    inv_std[ch] = istd;
    const double g = params.gamma[ch];
    const double b = params.beta[ch];
    for (int n = 0; n < in.n; ++n) {
      const std::size_t off = input.offset(n, ch, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) {
        const double xh = (input[off + q] - mean) * istd;
        xhat[off + q] = static_cast<float>(xh);
        out[off + q] = static_cast<float>(g * xh + b);
      }
    }
  }
  if (cache != nullptr) {
    cache->mode = mode;
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

BatchNormGrads batchnorm_backward(const BatchNormCache& cache,
                                  const BatchNormParams& params,
                                  const Tensor& grad_out) {
  const Shape in = cache.normalized.shape();
  require_same(in, grad_out.shape(), "batchnorm_backward");
  const int c = params.channels();
  const std::size_t plane = static_cast<std::size_t>(in.h) * in.w;
  const double count = static_cast<double>(plane * in.n);
  BatchNormGrads g{Tensor(in), Tensor::vector(c), Tensor::vector(c)};
  for (int ch = 0; ch < c; ++ch) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (int n = 0; n < in.n; ++n) {
      const std::size_t off = cache.normalized.offset(n, ch, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) {
        sum_g += grad_out[off + q];
        sum_gx += static_cast<double>(grad_out[off + q]) * cache.normalized[off + q];
      }
    }
    g.beta[ch] = static_cast<float>(sum_g);
    g.gamma[ch] = static_cast<float>(sum_gx);
    const double scale = params.gamma[ch] * cache.inv_std[ch];
    for (int n = 0; n < in.n; ++n) {
      const std::size_t off = cache.normalized.offset(n, ch, 0, 0);
      for (std::size_t q = 0; q < plane; ++q) {
        double v = grad_out[off + q];
        if (cache.mode == Mode::train) {
          v -= sum_g / count + cache.normalized[off + q] * sum_gx / count;
        }
        g.input[off + q] = static_cast<float>(scale * v);
      }
    }
  }
  return g;
}

LossResult softmax_cross_entropy(const Tensor& logits,
                                 std::span<const int> labels) {
  const int n = logits.shape().n;
  const int k = static_cast<int>(logits.shape().sample_size());
  if (static_cast<std::size_t>(n) != labels.size()) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(n) +
                         " samples but " + std::to_string(labels.size()) +
                         " labels");
  }
  LossResult r{0.0, Tensor(logits.shape())};
  if (n == 0) return r;
  std::vector<double> p(k);
  for (int s = 0; s < n; ++s) {
    const int y = labels[s];
    if (y < 0 || y >= k) {
      throw InputError("softmax_cross_entropy: label " + std::to_string(y) +
                       " outside [0, " + std::to_string(k) + ")");
    }
    const float* z = logits.raw() + static_cast<std::size_t>(s) * k;
    double zmax = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < k; ++j) zmax = std::max(zmax, static_cast<double>(z[j]));
    double denom = 0.0;
    for (int j = 0; j < k; ++j) {
      p[j] = std::exp(z[j] - zmax);
      denom += p[j];
    }
    r.loss += std::log(denom) - (z[y] - zmax);
    float* g = r.grad_logits.raw() + static_cast<std::size_t>(s) * k;
    for (int j = 0; j < k; ++j) {
      const double pj = p[j] / denom;
      g[j] = static_cast<float>((pj - (j == y ? 1.0 : 0.0)) / n);
    }
  }
  r.loss /= n;
  return r;
}

}  // namespace decomposeme
