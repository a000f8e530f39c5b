#include <Eigen/Dense>
#include <algorithm>

#include "decomposeme/error.hpp"
#include "decomposeme/ops.hpp"
#include "decomposeme/parallel.hpp"

namespace decomposeme {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

// Upper bound on the im2col buffer per GEMM, in elements.
constexpr std::size_t kColumnBudget = std::size_t{1} << 18;

struct ConvDims {
  int c, h, w;        // input plane count and extent
  int kh, kw;         // kernel extent
  int oh, ow;         // output extent
  ConvGeometry g;
  int k() const { return c * kh * kw; }
  int p() const { return oh * ow; }
};

ConvDims dims_of(const Shape& in, const KernelBank2D& bank) {
  const Shape out = conv2d_output_shape(in, bank);
  return {in.c, in.h, in.w, bank.kernel_h(), bank.kernel_w(), out.h, out.w,
          bank.geometry};
}

// Output columns [lo, hi) of kernel column j read inside the input row.
struct ColumnSpan {
  int lo, hi;
};

ColumnSpan valid_columns(const ConvDims& d, int j) {
  const int s = d.g.stride_w;
  const int first = d.g.pad_w - j;  // smallest ox * s that lands on ix >= 0
  int lo = first <= 0 ? 0 : (first + s - 1) / s;
  const int last = d.w - 1 + d.g.pad_w - j;
  int hi = last < 0 ? 0 : last / s + 1;
  lo = std::min(lo, d.ow);
  hi = std::clamp(hi, lo, d.ow);
  return {lo, hi};
}

// Writes one sample's patches into columns [col0, col0 + P) of a K x ld matrix.
template <class T>
void im2col(const float* x, const ConvDims& d, T* cols, std::size_t ld,
            std::size_t col0) {
  const int s = d.g.stride_w;
  for (int c = 0; c < d.c; ++c) {
    const float* plane = x + static_cast<std::size_t>(c) * d.h * d.w;
    for (int i = 0; i < d.kh; ++i) {
      for (int j = 0; j < d.kw; ++j) {
        const ColumnSpan span = valid_columns(d, j);
        const int off = j - d.g.pad_w;
        const std::size_t row = (static_cast<std::size_t>(c) * d.kh + i) * d.kw + j;
        T* dst = cols + row * ld + col0;
        for (int oy = 0; oy < d.oh; ++oy) {
          const int iy = oy * d.g.stride_h - d.g.pad_h + i;
          T* drow = dst + static_cast<std::size_t>(oy) * d.ow;
          if (iy < 0 || iy >= d.h) {
            std::fill(drow, drow + d.ow, T(0));
            continue;
          }
          const float* srow = plane + static_cast<std::size_t>(iy) * d.w + off;
          std::fill(drow, drow + span.lo, T(0));
          if (s == 1) {
            std::copy(srow + span.lo, srow + span.hi, drow + span.lo);
          } else {
            for (int ox = span.lo; ox < span.hi; ++ox) drow[ox] = static_cast<T>(srow[ox * s]);
          }
          std::fill(drow + span.hi, drow + d.ow, T(0));
        }
      }
    }
  }
}

// Adds one sample's column block back into a C x H x W accumulator.
template <class T>
void col2im(const T* cols, std::size_t ld, std::size_t col0, const ConvDims& d,
            T* acc) {
  const int s = d.g.stride_w;
  for (int c = 0; c < d.c; ++c) {
    T* plane = acc + static_cast<std::size_t>(c) * d.h * d.w;
    for (int i = 0; i < d.kh; ++i) {
      for (int j = 0; j < d.kw; ++j) {
        const ColumnSpan span = valid_columns(d, j);
        const int off = j - d.g.pad_w;
        const std::size_t row = (static_cast<std::size_t>(c) * d.kh + i) * d.kw + j;
        const T* src = cols + row * ld + col0;
        for (int oy = 0; oy < d.oh; ++oy) {
          const int iy = oy * d.g.stride_h - d.g.pad_h + i;
          if (iy < 0 || iy >= d.h) continue;
          T* drow = plane + static_cast<std::size_t>(iy) * d.w + off;
          const T* srow = src + static_cast<std::size_t>(oy) * d.ow;
          if (s == 1) {
            ArrMap<T>(drow + span.lo, span.hi - span.lo) +=
                ConstArrMap<T>(srow + span.lo, span.hi - span.lo);
          } else {
            for (int ox = span.lo; ox < span.hi; ++ox) drow[ox * s] += srow[ox];
          }
        }
      }
    }
  }
}

// Column layout of one sample. The dense layout has one column per output
// pixel. The wide layout (stride 1) has one column per padded input position
// from the first output pixel to the last, so each patch row is a contiguous
// slice of the padded plane. Columns past the output width are dropped on the
// way out and carry zero gradient on the way back.
struct Columns {
  bool wide;
  std::size_t per_sample;
  std::size_t pitch;  // column distance between output rows
};

Columns columns_of(const ConvDims& d) {
  if (d.g.stride_h == 1 && d.g.stride_w == 1) {
    const std::size_t wp = static_cast<std::size_t>(d.w) + 2 * d.g.pad_w;
    const std::size_t span = static_cast<std::size_t>(d.oh - 1) * wp + d.ow;
    if (span * 4 <= static_cast<std::size_t>(d.p()) * 5) return {true, span, wp};
  }
  return {false, static_cast<std::size_t>(d.p()), static_cast<std::size_t>(d.ow)};
}

std::size_t padded_size(const ConvDims& d) {
  return static_cast<std::size_t>(d.c) * (d.h + 2 * d.g.pad_h) * (d.w + 2 * d.g.pad_w);
}

bool padded(const ConvDims& d) { return d.g.pad_h != 0 || d.g.pad_w != 0; }

// Copies one sample into a zero-bordered C x Hp x Wp buffer.
void pad_sample(const float* x, const ConvDims& d, float* xp) {
  const std::size_t wp = static_cast<std::size_t>(d.w) + 2 * d.g.pad_w;
  const std::size_t hp = static_cast<std::size_t>(d.h) + 2 * d.g.pad_h;
  std::fill(xp, xp + d.c * hp * wp, 0.0f);
  for (int c = 0; c < d.c; ++c) {
    for (int y = 0; y < d.h; ++y) {
      const float* src = x + (static_cast<std::size_t>(c) * d.h + y) * d.w;
      std::copy(src, src + d.w, xp + (c * hp + y + d.g.pad_h) * wp + d.g.pad_w);
    }
  }
}

template <class T>
void im2col_wide(const float* xp, const ConvDims& d, std::size_t span, T* cols,
                 std::size_t ld, std::size_t col0) {
  const std::size_t wp = static_cast<std::size_t>(d.w) + 2 * d.g.pad_w;
  const std::size_t plane = (static_cast<std::size_t>(d.h) + 2 * d.g.pad_h) * wp;
  const auto n = static_cast<Eigen::Index>(span);
  std::size_t row = 0;
  for (int c = 0; c < d.c; ++c) {
    for (int i = 0; i < d.kh; ++i) {
      for (int j = 0; j < d.kw; ++j, ++row) {
        ArrMap<T>(cols + row * ld + col0, n) =
            ConstArrMap<float>(xp + c * plane + i * wp + j, n).template cast<T>();
      }
    }
  }
}

template <class T>
void col2im_wide(const T* cols, std::size_t ld, std::size_t col0, const ConvDims& d,
                 std::size_t span, T* accp) {
  const std::size_t wp = static_cast<std::size_t>(d.w) + 2 * d.g.pad_w;
  const std::size_t plane = (static_cast<std::size_t>(d.h) + 2 * d.g.pad_h) * wp;
  const auto n = static_cast<Eigen::Index>(span);
  std::size_t row = 0;
  for (int c = 0; c < d.c; ++c) {
    for (int i = 0; i < d.kh; ++i) {
      for (int j = 0; j < d.kw; ++j, ++row) {
        ArrMap<T>(accp + c * plane + i * wp + j, n) += ConstArrMap<T>(cols + row * ld + col0, n);
      }
    }
  }
}

int samples_per_block(const ConvDims& d, const Columns& cl) {
  const std::size_t per = static_cast<std::size_t>(d.k()) * cl.per_sample;
  return static_cast<int>(std::max<std::size_t>(1, kColumnBudget / std::max<std::size_t>(1, per)));
}

// Fills columns [col0, col0 + per_sample) for one sample.
template <class T>
void gather(const float* x, const ConvDims& d, const Columns& cl, std::vector<float>& scratch,
            T* cols, std::size_t ld, std::size_t col0) {
  if (!cl.wide) {
    im2col(x, d, cols, ld, col0);
    return;
  }
  if (padded(d)) {
    scratch.resize(padded_size(d));
    pad_sample(x, d, scratch.data());
    x = scratch.data();
  }
  im2col_wide(x, d, cl.per_sample, cols, ld, col0);
}

template <class T>
Tensor conv2d_impl(const Tensor& input, const KernelBank2D& bank,
                   const Exec& exec) {
  const Shape in = input.shape();
  const ConvDims d = dims_of(in, bank);
  const Columns cl = columns_of(d);
  const int f = bank.filters();
  const Shape out_shape{in.n, f, d.oh, d.ow};
  Tensor out(out_shape);
  const RowMat<T> w =
      ConstMatMap<float>(bank.weights.raw(), f, d.k()).template cast<T>();
  const int block = samples_per_block(d, cl);
  const std::size_t p = d.p();

  run_chunks(in.n, exec.threads, [&](int, int begin, int end) {
    std::vector<T> cols;
    std::vector<float> scratch;
    RowMat<T> res;
    for (int s0 = begin; s0 < end; s0 += block) {
      const int s1 = std::min(end, s0 + block);
      const std::size_t ncols = static_cast<std::size_t>(s1 - s0) * cl.per_sample;
      cols.resize(static_cast<std::size_t>(d.k()) * ncols);
      for (int s = s0; s < s1; ++s) {
        gather(input.sample(s).data(), d, cl, scratch, cols.data(), ncols,
               static_cast<std::size_t>(s - s0) * cl.per_sample);
      }
      res.noalias() = w * ConstMatMap<T>(cols.data(), d.k(), ncols);
      for (int s = s0; s < s1; ++s) {
        float* y = out.sample(s).data();
        for (int fi = 0; fi < f; ++fi) {
          const T b = static_cast<T>(bank.bias[fi]);
          const T* r = res.data() + static_cast<std::size_t>(fi) * ncols +
                       static_cast<std::size_t>(s - s0) * cl.per_sample;
          float* yf = y + static_cast<std::size_t>(fi) * p;
          for (int oy = 0; oy < d.oh; ++oy) {
            ArrMap<float>(yf + static_cast<std::size_t>(oy) * d.ow, d.ow) =
                (ConstArrMap<T>(r + oy * cl.pitch, d.ow) + b).template cast<float>();
          }
        }
      }
    }
  });
  return out;
}

template <class T>
Conv2dGrads conv2d_backward_impl(const Tensor& input, const KernelBank2D& bank,
                                 const Tensor& grad_out, const Exec& exec,
                                 bool want_input) {
  const Shape in = input.shape();
  const ConvDims d = dims_of(in, bank);
  const Columns cl = columns_of(d);
  const int f = bank.filters();
  const Shape expect{in.n, f, d.oh, d.ow};
  if (!(grad_out.shape() == expect)) {
    throw DimensionError("conv2d_backward: grad_out is " +
                         to_string(grad_out.shape()) + ", expected " +
                         to_string(expect));
  }
  const RowMat<T> w =
      ConstMatMap<float>(bank.weights.raw(), f, d.k()).template cast<T>();
  const int block = samples_per_block(d, cl);
  const std::size_t p = d.p();
  const int chunks = chunk_count(in.n, exec.threads);
  const bool crop = cl.wide && padded(d);

  std::vector<RowMat<T>> dw(chunks, RowMat<T>::Zero(f, d.k()));
  std::vector<std::vector<double>> db(chunks, std::vector<double>(f, 0.0));
  Conv2dGrads grads;
  if (want_input) grads.input = Tensor(in);

  run_chunks(in.n, exec.threads, [&](int chunk, int begin, int end) {
    std::vector<T> cols;
    std::vector<float> scratch;
    RowMat<T> g, dcols;
    std::vector<T> acc;
    for (int s0 = begin; s0 < end; s0 += block) {
      const int s1 = std::min(end, s0 + block);
      const std::size_t ncols = static_cast<std::size_t>(s1 - s0) * cl.per_sample;
      cols.resize(static_cast<std::size_t>(d.k()) * ncols);
      g.resize(f, static_cast<Eigen::Index>(ncols));
      if (cl.wide) g.setZero();
      for (int s = s0; s < s1; ++s) {
        const std::size_t col0 = static_cast<std::size_t>(s - s0) * cl.per_sample;
        gather(input.sample(s).data(), d, cl, scratch, cols.data(), ncols, col0);
        const float* go = grad_out.sample(s).data();
        for (int fi = 0; fi < f; ++fi) {
          const float* src = go + static_cast<std::size_t>(fi) * p;
          T* grow = g.data() + static_cast<std::size_t>(fi) * ncols + col0;
          for (int oy = 0; oy < d.oh; ++oy) {
            ArrMap<T>(grow + oy * cl.pitch, d.ow) =
                ConstArrMap<float>(src + static_cast<std::size_t>(oy) * d.ow, d.ow)
                    .template cast<T>();
          }
          db[chunk][fi] +=
              ConstArrMap<float>(src, static_cast<Eigen::Index>(p)).template cast<double>().sum();
        }
      }
      const ConstMatMap<T> cm(cols.data(), d.k(), ncols);
      dw[chunk].noalias() += g * cm.transpose();
      if (want_input) {
        dcols.noalias() = w.transpose() * g;
        acc.resize(crop ? padded_size(d) : in.sample_size());
        for (int s = s0; s < s1; ++s) {
          const std::size_t col0 = static_cast<std::size_t>(s - s0) * cl.per_sample;
          std::fill(acc.begin(), acc.end(), T(0));
          if (cl.wide) {
            col2im_wide(dcols.data(), ncols, col0, d, cl.per_sample, acc.data());
          } else {
            col2im(dcols.data(), ncols, col0, d, acc.data());
          }
          float* gx = grads.input.sample(s).data();
          if (!crop) {
            for (std::size_t q = 0; q < acc.size(); ++q) gx[q] = static_cast<float>(acc[q]);
            continue;
          }
          const std::size_t wp = static_cast<std::size_t>(d.w) + 2 * d.g.pad_w;
          const std::size_t hp = static_cast<std::size_t>(d.h) + 2 * d.g.pad_h;
          for (int c = 0; c < d.c; ++c) {
            for (int y = 0; y < d.h; ++y) {
              const T* src = acc.data() + (c * hp + y + d.g.pad_h) * wp + d.g.pad_w;
              ArrMap<float>(gx + (static_cast<std::size_t>(c) * d.h + y) * d.w, d.w) =
                  ConstArrMap<T>(src, d.w).template cast<float>();
            }
          }
        }
      }
    }
  });

  for (int k = 1; k < chunks; ++k) {
    dw[0] += dw[k];
    for (int fi = 0; fi < f; ++fi) db[0][fi] += db[k][fi];
  }
  grads.weights = Tensor(bank.weights.shape());
  MatMap<float>(grads.weights.raw(), f, d.k()) = dw[0].template cast<float>();
  grads.bias = Tensor::vector(f);
  for (int fi = 0; fi < f; ++fi) grads.bias[fi] = static_cast<float>(db[0][fi]);
  return grads;
}

}  // namespace

KernelBank2D KernelBank2D::zeros(int filters, int channels, int kernel_h,
                                 int kernel_w, ConvGeometry geometry) {
  KernelBank2D bank;
  bank.weights = Tensor({filters, channels, kernel_h, kernel_w});
  bank.bias = Tensor::vector(filters);
  bank.geometry = geometry;
  bank.validate();
  return bank;
}

void KernelBank2D::validate() const {
  const Shape s = weights.shape();
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
    throw ConfigError("kernel bank needs F, C, d_v, d_h >= 1, got " +
                      to_string(s));
  }
  if (bias.size() != static_cast<std::size_t>(s.n)) {
    throw DimensionError("kernel bank bias has " + std::to_string(bias.size()) +
                         " entries for " + std::to_string(s.n) + " filters");
  }
  if (geometry.stride_h < 1 || geometry.stride_w < 1) {
    throw ConfigError("conv stride must be positive");
  }
  if (geometry.pad_h < 0 || geometry.pad_w < 0) {
    throw ConfigError("conv padding must be non-negative");
  }
}

Shape conv2d_output_shape(const Shape& input, const KernelBank2D& bank) {
  bank.validate();
  if (input.c != bank.channels()) {
    throw DimensionError("conv2d: input has " + std::to_string(input.c) +
                         " channels (axis C) but the bank expects " +
                         std::to_string(bank.channels()));
  }
  const ConvGeometry& g = bank.geometry;
  auto extent = [](int size, int pad, int k, int stride, const char* axis) {
    const int span = size + 2 * pad - k;
    if (span < 0 || span % stride != 0) {
      throw ConfigError(std::string("conv2d: non-integral output along ") +
                        axis + " (size " + std::to_string(size) + ", pad " +
                        std::to_string(pad) + ", kernel " + std::to_string(k) +
                        ", stride " + std::to_string(stride) + ")");
    }
    return span / stride + 1;
  };
  return {input.n, bank.filters(),
          extent(input.h, g.pad_h, bank.kernel_h(), g.stride_h, "H"),
          extent(input.w, g.pad_w, bank.kernel_w(), g.stride_w, "W")};
}

Tensor conv2d(const Tensor& input, const KernelBank2D& bank, const Exec& exec) {
  if (exec.precision == Precision::f32) return conv2d_impl<float>(input, bank, exec);
  return conv2d_impl<double>(input, bank, exec);
}

Conv2dGrads conv2d_backward(const Tensor& input, const KernelBank2D& bank,
                            const Tensor& grad_out, const Exec& exec,
                            bool want_input_grad) {
  if (exec.precision == Precision::f32) {
    return conv2d_backward_impl<float>(input, bank, grad_out, exec,
                                       want_input_grad);
  }
  return conv2d_backward_impl<double>(input, bank, grad_out, exec,
                                      want_input_grad);
}

}  // namespace decomposeme
