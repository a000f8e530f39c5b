#pragma once

// Analytic parameter and multiply-accumulate accounting. One MAC is one
// multiply plus one add; bias adds, pooling and activations count zero.

#include <string>
#include <vector>

#include "decomposeme/model.hpp"

namespace decomposeme {

struct CostRow {
  std::string name;  // "<kind>_<index>" over the expanded layer list
  LayerKind kind = LayerKind::relu;
  long long params = 0;
  long long macs = 0;
  Shape output{};
};

struct CostReport {
  std::vector<CostRow> rows;
  long long conv_params = 0;  // conv2d + decomposed
  long long fc_params = 0;    // linear
  long long other_params = 0; // batchnorm
  long long total_macs = 0;

  long long total_params() const { return conv_params + fc_params + other_params; }
};

/// MACs of one layer given its per-sample input and output extents.
long long layer_macs(const LayerSpec& spec, const Shape& input, const Shape& output);

CostReport count_macs(const ModelSpec& spec);
/// Same with the spec's input extent replaced by (C, H, W) of `input`.
CostReport count_macs(const ModelSpec& spec, const Shape& input);

/// C F d / (L (C + F)): per-pixel MAC ratio of a d x d conv over a decomposed
/// layer with L intermediate channels.
double predicted_speedup(int channels, int filters, int kernel, int width);

struct SpecComparison {
  std::string name_a, name_b;
  CostReport a, b;
};

SpecComparison compare_specs(const ModelSpec& a, const ModelSpec& b);
SpecComparison compare_specs(const ModelSpec& a, const ModelSpec& b, const Shape& input);

/// b / a, 1 when both are zero.
double ratio(long long a, long long b);

/// `layer,kind,params,macs,out_c,out_h,out_w` then TOTAL_CONVP, TOTAL_FCP and
/// TOTAL_MACS rows.
std::string to_csv(const CostReport& report);
/// `metric,<name a>,<name b>,ratio` for conv_params, fc_params, total_params and macs.
std::string to_csv(const SpecComparison& cmp);

}  // namespace decomposeme
