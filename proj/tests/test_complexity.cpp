#include <doctest.h>

#include <random>
#include <sstream>

#include "decomposeme/complexity.hpp"
#include "decomposeme/error.hpp"
#include "oracles.hpp"

using namespace decomposeme;

namespace {

ModelSpec single(LayerSpec l, Shape in) {
  ModelSpec s;
  s.input = in;
  s.head = HeadStyle::compact;
  s.layers = {l};
  return s;
}

}  // namespace

TEST_SUITE("complexity") {

TEST_CASE("hand-counted layers") {
  CHECK(count_macs(single(LayerSpec::conv2d(1, 1, 1), {1, 1, 4, 4})).rows[0].macs == 16);
  CHECK(count_macs(single(LayerSpec::conv2d(3, 2, 3), {1, 3, 5, 5})).rows[0].macs == 486);
  const CostReport r = count_macs(single(LayerSpec::conv2d(3, 2, 3), {1, 3, 5, 5}));
  // conv, then the compact head's linear(18 -> 10).
  REQUIRE(r.rows.size() == 2);
  CHECK(r.rows[1].macs == 180);
  CHECK(r.rows[1].kind == LayerKind::linear);
  CHECK(r.rows[0].name == "conv2d_0");
  CHECK(r.rows[1].name == "linear_1");
  CHECK(r.rows[0].output == Shape{1, 2, 3, 3});
}

TEST_CASE("rows sum to totals") {
  for (const std::string& name : builtin_model_names()) {
    CAPTURE(name);
    const CostReport r = count_macs(*builtin_model(name));
    long long macs = 0, conv = 0, fc = 0, other = 0;
    for (const CostRow& row : r.rows) {
      macs += row.macs;
      if (row.kind == LayerKind::conv2d || row.kind == LayerKind::decomposed) conv += row.params;
      else if (row.kind == LayerKind::linear) fc += row.params;
      else other += row.params;
      if (row.kind == LayerKind::relu || row.kind == LayerKind::maxpool ||
          row.kind == LayerKind::batchnorm || row.kind == LayerKind::avgpool_global) {
        CHECK(row.macs == 0);
      }
    }
    CHECK(macs == r.total_macs);
    CHECK(conv == r.conv_params);
    CHECK(fc == r.fc_params);
    CHECK(other == r.other_params);
    CHECK(r.conv_params == conv_param_count(*builtin_model(name)));
    CHECK(r.total_params() == total_param_count(*builtin_model(name)));
  }
}

TEST_CASE("MAC counts equal an instrumented literal forward pass") {
  std::mt19937_64 rng(31);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  for (int t = 0; t < 20; ++t) {
    const int c = pick(1, 4), f = pick(1, 4), k = pick(1, 4), s = pick(1, 2), p = pick(0, 2);
    const int h = k + pick(0, 6), w = k + pick(0, 6);
    const Shape in{1, c, (h - k) / s * s + k, (w - k) / s * s + k};
    const LayerSpec specs[] = {LayerSpec::conv2d(c, f, k, s, p),
                               LayerSpec::decomposed(c, pick(1, 4), f, k, Nonlinearity::relu, s, p)};
    for (LayerSpec l : specs) {
      if (l.kind == LayerKind::decomposed) l.order = pick(0, 1) ? KernelOrder::horizontal_first
                                                                : KernelOrder::vertical_first;
      Shape out;
      try {
        out = layer_output_shape(l, in);
      } catch (const Error&) {
        continue;  // padding makes this extent non-integral
      }
      CAPTURE(t);
      CHECK(layer_macs(l, in, out) == oracle::instrumented_macs(l, in, rng));
    }
  }
  const LayerSpec lin = LayerSpec::linear(7);
  CHECK(layer_macs(lin, {1, 2, 3, 3}, {1, 7, 1, 1}) ==
        oracle::instrumented_macs(lin, {1, 2, 3, 3}, rng));
}

TEST_CASE("predicted_speedup") {
  CHECK(predicted_speedup(256, 256, 3, 256) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(predicted_speedup(3, 64, 11, 64) == doctest::Approx(3.0 * 64 * 11 / (64.0 * 67)));
  CHECK(predicted_speedup(3, 64, 11, 64) < 1.0);
  // L (C + F) == C F d: 2 * (4 + 4) == 4 * 4 * 1.
  CHECK(predicted_speedup(4, 4, 1, 2) == 1.0);
}

TEST_CASE("speedup exceeds one exactly when L(C+F) < CFd") {
  int points = 0;
  for (int c : {1, 3, 16, 64, 256})
    for (int f : {1, 8, 64, 512})
      for (int d : {1, 3, 5, 7, 11})
        for (int l : {1, 2, 4, 16, 64, 128, 256, 512, 1024, 2048}) {
          const bool cheaper = (long long)l * (c + f) < (long long)c * f * d;
          CHECK((predicted_speedup(c, f, d, l) > 1.0) == cheaper);
          ++points;
        }
  CHECK(points == 1000);
}

TEST_CASE("the per-pixel ratio agrees with counted layer MACs") {
  const Shape in{1, 256, 14, 14};
  const LayerSpec conv = LayerSpec::conv2d(256, 256, 3, 1, 1);
  const LayerSpec dec = LayerSpec::decomposed(256, 256, 256, 3, Nonlinearity::relu, 1, 1);
  const double measured = double(layer_macs(conv, in, layer_output_shape(conv, in))) /
                          double(layer_macs(dec, in, layer_output_shape(dec, in)));
  CHECK(measured == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("compare_specs") {
  const ModelSpec a = *builtin_model("lenet");
  const SpecComparison same = compare_specs(a, a);
  CHECK(ratio(same.a.conv_params, same.b.conv_params) == 1.0);
  CHECK(ratio(same.a.total_macs, same.b.total_macs) == 1.0);
  CHECK(ratio(0, 0) == 1.0);

  const SpecComparison dec = compare_specs(a, *builtin_model("lenet-dec2"));
  CHECK(double(dec.a.conv_params) / dec.b.conv_params >= 2.0);

  const SpecComparison vgg = compare_specs(*builtin_model("vgg-b"),
                                           *builtin_model("vgg-b-dec8-compact-avg"));
  CHECK(1.0 - ratio(vgg.a.total_params(), vgg.b.total_params()) >= 0.90);

  // A different input extent changes MACs, not conv parameters.
  const SpecComparison big = compare_specs(a, a, {1, 1, 32, 32});
  CHECK(big.a.conv_params == same.a.conv_params);
  CHECK(big.a.total_macs > same.a.total_macs);
  CHECK_THROWS_AS(count_macs(a, {1, 3, 28, 28}), ValidationError);
}

TEST_CASE("CSV layout") {
  const CostReport r = count_macs(single(LayerSpec::conv2d(3, 2, 3), {1, 3, 5, 5}));
  CHECK(to_csv(r) ==
        "layer,kind,params,macs,out_c,out_h,out_w\n"
        "conv2d_0,conv2d,56,486,2,3,3\n"
        "linear_1,linear,190,180,10,1,1\n"
        "TOTAL_CONVP,,56,,,,\n"
        "TOTAL_FCP,,190,,,,\n"
        "TOTAL_MACS,,,666,,,\n");
  const std::string cmp = to_csv(compare_specs(*builtin_model("lenet"), *builtin_model("lenet")));
  CHECK(cmp.rfind("metric,lenet,lenet,ratio\n", 0) == 0);
  CHECK(cmp.find("conv_params,25570,25570,1") != std::string::npos);
}

}  // TEST_SUITE
