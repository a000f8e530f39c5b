#pragma once

// Low-rank factorisation of conv kernels into sums of outer products of 1D
// filters, and construction of DecomposedLayers that reproduce (or truncate)
// a 2D kernel bank.

#include <span>
#include <vector>

#include "decomposeme/layers.hpp"
#include "decomposeme/ops.hpp"

namespace decomposeme {

/// Small dense row-major matrix of doubles.
struct KernelMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  KernelMatrix() = default;
  KernelMatrix(int r, int c) : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, 0.0) {}
  KernelMatrix(int r, int c, std::vector<double> v);

  double& operator()(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
};

double frobenius_norm(const KernelMatrix& m);
KernelMatrix operator-(const KernelMatrix& a, const KernelMatrix& b);
KernelMatrix scaled(const KernelMatrix& m, double alpha);

/// kernel = sum_k sigma[k] * v[k] h[k]^T, sigma descending. v[k] has `rows`
/// entries (the vertical filter), h[k] has `cols` entries (the horizontal
/// filter). The first nonzero entry of each v[k] is positive.
struct RankComponents {
  int rows = 0;
  int cols = 0;
  std::vector<double> sigma;
  std::vector<std::vector<double>> v;
  std::vector<std::vector<double>> h;

  int rank() const { return static_cast<int>(sigma.size()); }
};

/// Largest side accepted by svd_small.
inline constexpr int kMaxKernelSide = 32;

/// Full SVD by one-sided Jacobi rotations. Both sides must be <= 32.
RankComponents svd_small(const KernelMatrix& m);

/// Same algorithm with only the column count limited; used for filters whose
/// input planes are stacked vertically into a (C*d_v) x d_h matrix.
RankComponents svd_tall(const KernelMatrix& m);

/// Top-`rank` truncation of svd_small; the best rank-`rank` approximation in
/// Frobenius norm.
RankComponents decompose_kernel(const KernelMatrix& kernel, int rank);

KernelMatrix reconstruct(const RankComponents& rc);

/// Filter `f` of the bank as a matrix. For vertical_first the C planes are
/// stacked vertically, giving (C*d_v) x d_h; for horizontal_first each plane
/// is transposed first, giving (C*d_h) x d_v.
KernelMatrix filter_matrix(const KernelBank2D& bank, int f,
                           KernelOrder order = KernelOrder::vertical_first);

/// svd_tall of every filter_matrix of the bank.
std::vector<RankComponents> decompose_bank(
    const KernelBank2D& bank, KernelOrder order = KernelOrder::vertical_first);

/// min(C*d_v, d_h) per filter (vertical_first), i.e. exact reproduction.
std::vector<int> full_ranks(const KernelBank2D& bank,
                            KernelOrder order = KernelOrder::vertical_first);

/// Spends `budget` intermediate channels: one per filter with a nonzero
/// kernel, the rest greedily on the largest remaining singular values.
/// Throws InfeasibleError when budget < number of nonzero filters.
std::vector<int> allocate_ranks(const KernelBank2D& bank, int budget,
                                KernelOrder order = KernelOrder::vertical_first);

/// One intermediate channel per kept (filter, component) pair. sigma is folded
/// into the first-stage kernel; each second-stage row reads only the channels
/// of its own source filter. b_v = 0 and b_h = bank bias.
DecomposedLayer build_decomposed_pair(
    const KernelBank2D& bank, std::span<const int> ranks,
    Nonlinearity nl = Nonlinearity::identity,
    KernelOrder order = KernelOrder::vertical_first);

DecomposedLayer build_decomposed_pair(
    const KernelBank2D& bank, int budget,
    Nonlinearity nl = Nonlinearity::identity,
    KernelOrder order = KernelOrder::vertical_first);

/// The (F, C, d, d) kernels a decomposed layer implements, read off by pushing
/// unit impulses through it. Requires nl == identity.
Tensor effective_kernels(const DecomposedLayer& layer);

/// Frobenius norm of bank.weights minus effective_kernels(layer).
/// Throws SemanticError when the layer is not linear.
double reconstruction_error(const KernelBank2D& bank, const DecomposedLayer& layer);

}  // namespace decomposeme
