#include "decomposeme/complexity.hpp"

#include <cstdio>
#include <sstream>

#include "decomposeme/error.hpp"

namespace decomposeme {

long long layer_macs(const LayerSpec& l, const Shape& input, const Shape& output) {
  const long long c = l.in, f = l.out, d = l.kernel;
  switch (l.kind) {
    case LayerKind::conv2d:
      return c * f * d * d * output.h * output.w;
    case LayerKind::decomposed: {
      // Intermediate extent: the first stage strides/pads only its own axis.
      long long h1 = input.h, w1 = input.w;
      if (l.order == KernelOrder::vertical_first) {
        h1 = output.h;
      } else {
        w1 = output.w;
      }
      return c * l.width * d * h1 * w1 + static_cast<long long>(l.width) * f * d *
                                             output.h * output.w;
    }
    case LayerKind::linear:
      return static_cast<long long>(input.sample_size()) * l.out;
    default: return 0;
  }
}

CostReport count_macs(const ModelSpec& spec) {
  CostReport r;
  const std::vector<LayerSpec> all = expanded_layers(spec);
  const std::vector<Shape> shapes = layer_shapes(spec);
  Shape cur{1, spec.input.c, spec.input.h, spec.input.w};
  for (std::size_t i = 0; i < all.size(); ++i) {
    const LayerSpec& l = all[i];
    CostRow row;
    row.name = to_string(l.kind) + "_" + std::to_string(i);
    row.kind = l.kind;
    row.params = param_count(l, cur);
    row.macs = layer_macs(l, cur, shapes[i]);
    row.output = shapes[i];
    if (l.is_conv_like()) {
      r.conv_params += row.params;
    } else if (l.kind == LayerKind::linear) {
      r.fc_params += row.params;
    } else {
      r.other_params += row.params;
    }
    r.total_macs += row.macs;
    r.rows.push_back(std::move(row));
    cur = shapes[i];
  }
  return r;
}

CostReport count_macs(const ModelSpec& spec, const Shape& input) {
  ModelSpec s = spec;
  s.input = {1, input.c, input.h, input.w};
  return count_macs(s);
}

double predicted_speedup(int channels, int filters, int kernel, int width) {
  if (channels < 1 || filters < 1 || kernel < 1 || width < 1) {
    throw InputError("predicted_speedup: C, F, d and L must be positive");
  }
  const double c = channels, f = filters, d = kernel, l = width;
  return c * f * d / (l * (c + f));
}

SpecComparison compare_specs(const ModelSpec& a, const ModelSpec& b) {
  return {a.name, b.name, count_macs(a), count_macs(b)};
}

SpecComparison compare_specs(const ModelSpec& a, const ModelSpec& b, const Shape& input) {
  return {a.name, b.name, count_macs(a, input), count_macs(b, input)};
}

double ratio(long long a, long long b) {
  if (a == 0 && b == 0) return 1.0;
  return static_cast<double>(b) / static_cast<double>(a);
}

std::string to_csv(const CostReport& report) {
  std::ostringstream out;
  out << "layer,kind,params,macs,out_c,out_h,out_w\n";
  for (const CostRow& r : report.rows) {
    out << r.name << ',' << to_string(r.kind) << ',' << r.params << ',' << r.macs << ','
        << r.output.c << ',' << r.output.h << ',' << r.output.w << '\n';
  }
  out << "TOTAL_CONVP,," << report.conv_params << ",,,,\n";
  out << "TOTAL_FCP,," << report.fc_params << ",,,,\n";
  out << "TOTAL_MACS,,," << report.total_macs << ",,,\n";
  return out.str();
}

std::string to_csv(const SpecComparison& cmp) {
  std::ostringstream out;
  out << "metric," << cmp.name_a << ',' << cmp.name_b << ",ratio\n";
  auto row = [&](const char* name, long long a, long long b) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", ratio(a, b));
    out << name << ',' << a << ',' << b << ',' << buf << '\n';
  };
  row("conv_params", cmp.a.conv_params, cmp.b.conv_params);
  row("fc_params", cmp.a.fc_params, cmp.b.fc_params);
  row("total_params", cmp.a.total_params(), cmp.b.total_params());
  row("macs", cmp.a.total_macs, cmp.b.total_macs);
  return out.str();
}

}  // namespace decomposeme
