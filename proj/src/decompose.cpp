#include "decomposeme/decompose.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "decomposeme/error.hpp"

namespace decomposeme {

KernelMatrix::KernelMatrix(int r, int c, std::vector<double> v)
    : rows(r), cols(c), values(std::move(v)) {
  if (values.size() != static_cast<std::size_t>(r) * c) {
    throw DimensionError("kernel matrix " + std::to_string(r) + "x" +
                         std::to_string(c) + " given " +
                         std::to_string(values.size()) + " values");
  }
}

double frobenius_norm(const KernelMatrix& m) {
  double s = 0.0;
  for (double v : m.values) s += v * v;
  return std::sqrt(s);
}

KernelMatrix operator-(const KernelMatrix& a, const KernelMatrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw DimensionError("kernel matrix difference: extents differ");
  }
  KernelMatrix r(a.rows, a.cols);
  for (std::size_t i = 0; i < a.values.size(); ++i) r.values[i] = a.values[i] - b.values[i];
  return r;
}

KernelMatrix scaled(const KernelMatrix& m, double alpha) {
  KernelMatrix r = m;
  for (double& v : r.values) v *= alpha;
  return r;
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void rotate(std::vector<double>& a, std::vector<double>& b, double c, double s) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    a[i] = c * x - s * y;
    b[i] = s * x + c * y;
  }
}

// One-sided (Hestenes) Jacobi: orthogonalise the columns of A by plane
// rotations accumulated into V. At convergence A V = U Sigma.
RankComponents jacobi_svd(const KernelMatrix& a) {
  const int m = a.rows, n = a.cols;
  std::vector<std::vector<double>> u(n, std::vector<double>(m));
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < m; ++i) u[j][i] = a(i, j);
    v[j][j] = 1.0;
  }
  constexpr int kMaxSweeps = 80;
  constexpr double kTol = 1e-15;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double alpha = dot(u[p], u[p]);
        const double beta = dot(u[q], u[q]);
        const double gamma = dot(u[p], u[q]);
        if (gamma == 0.0 || std::fabs(gamma) <= kTol * std::sqrt(alpha * beta)) {
          continue;
        }
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(u[p], u[q], c, s);
        rotate(v[p], v[q], c, s);
        rotated = true;
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sig(n);
  for (int j = 0; j < n; ++j) sig[j] = std::sqrt(dot(u[j], u[j]));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return sig[x] > sig[y]; });

  const int k = std::min(m, n);
  RankComponents rc;
  rc.rows = m;
  rc.cols = n;
  for (int idx = 0; idx < k; ++idx) {
    const int j = order[idx];
    std::vector<double> left(m, 0.0);
    std::vector<double> right = v[j];
    if (sig[j] > 0.0) {
      for (int i = 0; i < m; ++i) left[i] = u[j][i] / sig[j];
    }
    // Sign convention: first nonzero entry of the vertical factor positive.
    for (int i = 0; i < m; ++i) {
      if (std::fabs(left[i]) > 1e-9) {
        if (left[i] < 0.0) {
          for (double& x : left) x = -x;
          for (double& x : right) x = -x;
        }
        break;
      }
    }
    rc.sigma.push_back(sig[j]);
    rc.v.push_back(std::move(left));
    rc.h.push_back(std::move(right));
  }
  return rc;
}

void require_square_geometry(const KernelBank2D& bank) {
  const ConvGeometry& g = bank.geometry;
  if (g.stride_h != g.stride_w || g.pad_h != g.pad_w) {
    throw ConfigError("decomposition needs equal stride and padding on both axes");
  }
}

}  // namespace

RankComponents svd_small(const KernelMatrix& m) {
  if (m.rows < 1 || m.cols < 1 || m.rows > kMaxKernelSide || m.cols > kMaxKernelSide) {
    throw ConfigError("svd_small: " + std::to_string(m.rows) + "x" +
                      std::to_string(m.cols) + " exceeds the " +
                      std::to_string(kMaxKernelSide) + "x" +
                      std::to_string(kMaxKernelSide) + " limit");
  }
  return jacobi_svd(m);
}

RankComponents svd_tall(const KernelMatrix& m) {
  if (m.rows < 1 || m.cols < 1 || m.cols > kMaxKernelSide) {
    throw ConfigError("svd_tall: column count " + std::to_string(m.cols) +
                      " outside [1, " + std::to_string(kMaxKernelSide) + "]");
  }
  return jacobi_svd(m);
}

RankComponents decompose_kernel(const KernelMatrix& kernel, int rank) {
  const int max_rank = std::min(kernel.rows, kernel.cols);
  if (rank < 1 || rank > max_rank) {
    throw InputError("decompose_kernel: rank " + std::to_string(rank) +
                     " outside [1, " + std::to_string(max_rank) + "]");
  }
  RankComponents rc = svd_small(kernel);
  rc.sigma.resize(rank);
  rc.v.resize(rank);
  rc.h.resize(rank);
  return rc;
}

KernelMatrix reconstruct(const RankComponents& rc) {
  KernelMatrix m(rc.rows, rc.cols);
  for (int k = 0; k < rc.rank(); ++k) {
    for (int i = 0; i < rc.rows; ++i) {
      const double a = rc.sigma[k] * rc.v[k][i];
      for (int j = 0; j < rc.cols; ++j) m(i, j) += a * rc.h[k][j];
    }
  }
  return m;
}

KernelMatrix filter_matrix(const KernelBank2D& bank, int f, KernelOrder order) {
  const int c = bank.channels(), kh = bank.kernel_h(), kw = bank.kernel_w();
  const bool vf = order == KernelOrder::vertical_first;
  KernelMatrix m(vf ? c * kh : c * kw, vf ? kw : kh);
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const double w = bank.weights.at(f, ch, i, j);
        if (vf) {
          m(ch * kh + i, j) = w;
        } else {
          m(ch * kw + j, i) = w;
        }
      }
    }
  }
  return m;
}

std::vector<RankComponents> decompose_bank(const KernelBank2D& bank,
                                           KernelOrder order) {
  bank.validate();
  std::vector<RankComponents> out;
  out.reserve(bank.filters());
  for (int f = 0; f < bank.filters(); ++f) {
    out.push_back(svd_tall(filter_matrix(bank, f, order)));
  }
  return out;
}

std::vector<int> full_ranks(const KernelBank2D& bank, KernelOrder order) {
  const int c = bank.channels();
  const int r = order == KernelOrder::vertical_first
                    ? std::min(c * bank.kernel_h(), bank.kernel_w())
                    : std::min(c * bank.kernel_w(), bank.kernel_h());
  return std::vector<int>(bank.filters(), r);
}

std::vector<int> allocate_ranks(const KernelBank2D& bank, int budget,
                                KernelOrder order) {
  const std::vector<RankComponents> comps = decompose_bank(bank, order);
  std::vector<int> ranks(comps.size(), 0);
  int required = 0;
  for (std::size_t f = 0; f < comps.size(); ++f) {
    if (!comps[f].sigma.empty() && comps[f].sigma[0] > 0.0) {
      ranks[f] = 1;
      ++required;
    }
  }
  if (budget < required) {
    throw InfeasibleError("rank budget " + std::to_string(budget) + " is below the " +
                          std::to_string(required) + " filters with nonzero kernels");
  }
  struct Candidate {
    double sigma;
    int filter, component;
  };
  std::vector<Candidate> rest;
  for (std::size_t f = 0; f < comps.size(); ++f) {
    for (int k = 1; k < comps[f].rank(); ++k) {
      if (comps[f].sigma[k] > 0.0) {
        rest.push_back({comps[f].sigma[k], static_cast<int>(f), k});
      }
    }
  }
  std::stable_sort(rest.begin(), rest.end(), [](const Candidate& a, const Candidate& b) {
    return a.sigma > b.sigma;
  });
  // Components of one filter come out of the SVD in descending order, so a
  // global descending pick always extends each filter's prefix.
  const std::size_t extra =
      std::min<std::size_t>(rest.size(), static_cast<std::size_t>(budget - required));
  for (std::size_t i = 0; i < extra; ++i) ++ranks[rest[i].filter];
  return ranks;
}

DecomposedLayer build_decomposed_pair(const KernelBank2D& bank,
                                      std::span<const int> ranks,
                                      Nonlinearity nl, KernelOrder order) {
  bank.validate();
  require_square_geometry(bank);
  if (ranks.size() != static_cast<std::size_t>(bank.filters())) {
    throw InputError("build_decomposed_pair: " + std::to_string(ranks.size()) +
                     " ranks for " + std::to_string(bank.filters()) + " filters");
  }
  const std::vector<RankComponents> comps = decompose_bank(bank, order);
  int total = 0;
  for (std::size_t f = 0; f < ranks.size(); ++f) {
    if (ranks[f] < 0 || ranks[f] > comps[f].rank()) {
      throw InputError("build_decomposed_pair: rank " + std::to_string(ranks[f]) +
                       " for filter " + std::to_string(f) + " outside [0, " +
                       std::to_string(comps[f].rank()) + "]");
    }
    total += ranks[f];
  }
  const int width = std::max(1, total);
  const int kh = bank.kernel_h(), kw = bank.kernel_w();
  DecomposedLayer layer = DecomposedLayer::zeros(
      bank.channels(), width, bank.filters(), kh, nl, bank.geometry.stride_h,
      bank.geometry.pad_h, order, kw);
  const bool vf = order == KernelOrder::vertical_first;
  Tensor& w1 = layer.first().weights;
  Tensor& w2 = layer.second().weights;
  int l = 0;
  for (int f = 0; f < bank.filters(); ++f) {
    const RankComponents& rc = comps[f];
    const int first_len = vf ? kh : kw;
    for (int k = 0; k < ranks[f]; ++k, ++l) {
      for (int ch = 0; ch < bank.channels(); ++ch) {
        for (int t = 0; t < first_len; ++t) {
          const float val = static_cast<float>(rc.sigma[k] * rc.v[k][ch * first_len + t]);
          if (vf) {
            w1.at(l, ch, t, 0) = val;
          } else {
            w1.at(l, ch, 0, t) = val;
          }
        }
      }
      for (int t = 0; t < rc.cols; ++t) {
        if (vf) {
          w2.at(f, l, 0, t) = static_cast<float>(rc.h[k][t]);
        } else {
          w2.at(f, l, t, 0) = static_cast<float>(rc.h[k][t]);
        }
      }
    }
  }
  layer.second().bias = bank.bias;
  return layer;
}

DecomposedLayer build_decomposed_pair(const KernelBank2D& bank, int budget,
                                      Nonlinearity nl, KernelOrder order) {
  const std::vector<int> ranks = allocate_ranks(bank, budget, order);
  return build_decomposed_pair(bank, ranks, nl, order);
}

Tensor effective_kernels(const DecomposedLayer& layer) {
  if (layer.nonlinearity != Nonlinearity::identity) {
    throw SemanticError("effective kernels are undefined for a nonlinear decomposed "
                        "layer (nl=" + to_string(layer.nonlinearity) + ")");
  }
  layer.validate();
  DecomposedLayer probe = layer;
  probe.first().geometry = ConvGeometry{};
  probe.second().geometry = ConvGeometry{};
  const int c = layer.channels();
  const int kh = layer.vertical.kernel_h(), kw = layer.horizontal.kernel_w();
  const int f = layer.filters();
  const int taps = c * kh * kw;
  Tensor impulses({taps + 1, c, kh, kw});
  for (int t = 0; t < taps; ++t) impulses.sample(t + 1)[t] = 1.0f;
  const Tensor resp = decomposed_apply(impulses, probe);
  Tensor kernels({f, c, kh, kw});
  for (int fi = 0; fi < f; ++fi) {
    const float base = resp[fi];
    for (int t = 0; t < taps; ++t) {
      kernels.sample(fi)[t] = resp[static_cast<std::size_t>(t + 1) * f + fi] - base;
    }
  }
  return kernels;
}

double reconstruction_error(const KernelBank2D& bank, const DecomposedLayer& layer) {
  const Tensor k = effective_kernels(layer);
  if (!(k.shape() == bank.weights.shape())) {
    throw DimensionError("reconstruction_error: layer implements " +
                         to_string(k.shape()) + " kernels, bank holds " +
                         to_string(bank.weights.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(bank.weights[i]) - k[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace decomposeme
