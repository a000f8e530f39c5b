#include <doctest.h>

#include <cmath>
#include <random>

#include "decomposeme/error.hpp"
#include "decomposeme/gradcheck.hpp"
#include "decomposeme/ops.hpp"
#include "grad_suite.hpp"
#include "oracles.hpp"

using namespace decomposeme;

namespace {

double fd_max_rel(const std::function<double(const Tensor&)>& f, const Tensor& x,
                  const Tensor& analytic, double eps) {
  const std::vector<double> num = oracle::numeric_gradient(f, x, eps);
  double worst = 0.0;
  for (std::size_t i = 0; i < num.size(); ++i) {
    worst = std::max(worst, oracle::rel_err(num[i], analytic[i]));
  }
  return worst;
}

}  // namespace

TEST_SUITE("tensor-core") {

TEST_CASE("conv2d of ones with a 2x2 ones kernel sums windows") {
  Tensor x({1, 1, 3, 3}, 1.0f);
  KernelBank2D b = KernelBank2D::zeros(1, 1, 2, 2);
  b.weights.fill(1.0f);
  const Tensor y = conv2d(x, b);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  for (float v : y.data()) CHECK(v == 4.0f);
}

TEST_CASE("1x1 unit kernel is the identity") {
  std::mt19937_64 rng(1);
  const Tensor x = oracle::random_tensor({2, 1, 4, 5}, rng);
  KernelBank2D b = KernelBank2D::zeros(1, 1, 1, 1);
  b.weights[0] = 1.0f;
  CHECK(max_abs_diff(conv2d(x, b), x) == 0.0);
}

TEST_CASE("seed-42 conv matches the loop reference") {
  std::mt19937_64 rng(42);
  const Tensor x = oracle::random_tensor({1, 2, 5, 5}, rng);
  const KernelBank2D b = oracle::random_bank(3, 2, 3, 3, {}, rng);
  CHECK(max_abs_diff(conv2d(x, b), oracle::conv2d(x, b)) < 1e-6);
}

TEST_CASE("conv2d agrees with the loop reference across strides, pads and precisions") {
  std::mt19937_64 rng(2024);
  for (int t = 0; t < 40; ++t) {
    const int c = std::uniform_int_distribution<int>(1, 4)(rng);
    const int f = std::uniform_int_distribution<int>(1, 4)(rng);
    const int kh = std::uniform_int_distribution<int>(1, 5)(rng);
    const int kw = std::uniform_int_distribution<int>(1, 5)(rng);
    const int sh = std::uniform_int_distribution<int>(1, 3)(rng);
    const int sw = std::uniform_int_distribution<int>(1, 3)(rng);
    const int ph = std::uniform_int_distribution<int>(0, 2)(rng);
    const int pw = std::uniform_int_distribution<int>(0, 2)(rng);
    const int oh = std::uniform_int_distribution<int>(1, 6)(rng);
    const int ow = std::uniform_int_distribution<int>(1, 6)(rng);
    const int h = (oh - 1) * sh + kh - 2 * ph, w = (ow - 1) * sw + kw - 2 * pw;
    if (h < 1 || w < 1) continue;
    const Tensor x = oracle::random_tensor({3, c, h, w}, rng);
    const KernelBank2D b = oracle::random_bank(f, c, kh, kw, {sh, sw, ph, pw}, rng);
    const Tensor ref = oracle::conv2d(x, b);
    CHECK(max_abs_diff(conv2d(x, b, {1, Precision::f64}), ref) < 1e-6);
    CHECK(max_abs_diff(conv2d(x, b, {1, Precision::f32}), ref) < 1e-5);
    CHECK(max_abs_diff(conv2d(x, b, {3, Precision::f64}), ref) < 1e-6);
  }
}

TEST_CASE("conv2d_backward agrees with the loop reference across strides, pads and precisions") {
  std::mt19937_64 rng(2025);
  int cases = 0;
  for (int t = 0; t < 60; ++t) {
    const int c = std::uniform_int_distribution<int>(1, 4)(rng);
    const int f = std::uniform_int_distribution<int>(1, 4)(rng);
    const int kh = std::uniform_int_distribution<int>(1, 5)(rng);
    const int kw = std::uniform_int_distribution<int>(1, 5)(rng);
    const int sh = std::uniform_int_distribution<int>(1, 2)(rng);
    const int sw = std::uniform_int_distribution<int>(1, 2)(rng);
    const int ph = std::uniform_int_distribution<int>(0, 2)(rng);
    const int pw = std::uniform_int_distribution<int>(0, 2)(rng);
    const int oh = std::uniform_int_distribution<int>(1, 12)(rng);
    const int ow = std::uniform_int_distribution<int>(1, 12)(rng);
    const int h = (oh - 1) * sh + kh - 2 * ph, w = (ow - 1) * sw + kw - 2 * pw;
    if (h < 1 || w < 1) continue;
    ++cases;
    const Tensor x = oracle::random_tensor({3, c, h, w}, rng);
    const KernelBank2D b = oracle::random_bank(f, c, kh, kw, {sh, sw, ph, pw}, rng);
    const Tensor gy = oracle::random_tensor({3, f, oh, ow}, rng);
    const oracle::ConvGrads ref = oracle::conv2d_backward(x, b, gy);
    for (const Exec e : {Exec{1, Precision::f64}, Exec{1, Precision::f32}, Exec{2, Precision::f64}}) {
      const Conv2dGrads got = conv2d_backward(x, b, gy, e);
      const double tol = e.precision == Precision::f32 ? 1e-4 : 1e-5;
      CHECK(max_abs_diff(got.input, ref.input) < tol);
      CHECK(max_abs_diff(got.weights, ref.weights) < tol);
      CHECK(max_abs_diff(got.bias, ref.bias) < tol);
    }
  }
  CHECK(cases > 30);
}

TEST_CASE("conv2d rejects bad shapes") {
  KernelBank2D b = KernelBank2D::zeros(2, 3, 3, 3);
  try {
    (void)conv2d(Tensor({1, 2, 5, 5}), b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("channels") != std::string::npos);
  }
  b = KernelBank2D::zeros(1, 1, 3, 3, ConvGeometry::square(2, 0));
  CHECK_THROWS_AS((void)conv2d(Tensor({1, 1, 6, 6}), b), ConfigError);
  CHECK_THROWS_AS((void)conv2d(Tensor({1, 1, 2, 2}), KernelBank2D::zeros(1, 1, 3, 3)), ConfigError);
  CHECK_THROWS_AS(KernelBank2D::zeros(0, 1, 3, 3), ConfigError);
}

TEST_CASE("conv2d_backward: zero upstream, 1x1 transpose, bias sums") {
  std::mt19937_64 rng(3);
  const Tensor x = oracle::random_tensor({2, 2, 4, 4}, rng);
  KernelBank2D b = oracle::random_bank(3, 2, 3, 3, ConvGeometry::square(1, 1), rng);
  Conv2dGrads g = conv2d_backward(x, b, Tensor({2, 3, 4, 4}));
  CHECK(l2_norm(g.input) == 0.0);
  CHECK(l2_norm(g.weights) == 0.0);
  CHECK(l2_norm(g.bias) == 0.0);

  const Tensor go = oracle::random_tensor({2, 3, 4, 4}, rng);
  g = conv2d_backward(x, b, go);
  for (int f = 0; f < 3; ++f) {
    double s = 0.0;
    for (int n = 0; n < 2; ++n)
      for (int i = 0; i < 16; ++i) s += go.sample(n)[f * 16 + i];
    CHECK(g.bias[f] == doctest::Approx(s).epsilon(1e-6));
  }

  KernelBank2D one = KernelBank2D::zeros(1, 1, 1, 1);
  one.weights[0] = 2.5f;
  const Tensor x1 = oracle::random_tensor({1, 1, 3, 3}, rng);
  const Tensor g1 = oracle::random_tensor({1, 1, 3, 3}, rng);
  const Tensor gi = conv2d_backward(x1, one, g1).input;
  for (std::size_t i = 0; i < gi.size(); ++i) CHECK(gi[i] == doctest::Approx(2.5f * g1[i]));

  CHECK_THROWS_AS(conv2d_backward(x, b, Tensor({2, 3, 3, 3})), DimensionError);
}

TEST_CASE("conv2d_backward seed 7 matches central differences") {
  std::mt19937_64 rng(7);
  const Tensor x = oracle::random_tensor({1, 2, 6, 6}, rng);
  KernelBank2D b = oracle::random_bank(2, 2, 3, 3, {}, rng);
  const Tensor r = oracle::random_tensor({1, 2, 4, 4}, rng);
  const Conv2dGrads g = conv2d_backward(x, b, r);
  CHECK(fd_max_rel([&](const Tensor& p) { return gradsuite::dot(conv2d(p, b), r); }, x, g.input,
                   1e-2) < 1e-2);
  CHECK(fd_max_rel(
            [&](const Tensor& p) {
              KernelBank2D q = b;
              q.weights = p;
              return gradsuite::dot(conv2d(x, q), r);
            },
            b.weights, g.weights, 1e-2) < 1e-2);
}

TEST_CASE("relu examples") {
  const Tensor x({1, 1, 1, 3}, std::vector<float>{-1, 0, 2});
  const Tensor y = relu(x);
  CHECK(y[0] == 0.0f);
  CHECK(y[1] == 0.0f);
  CHECK(y[2] == 2.0f);
  const Tensor g = relu_backward(x, Tensor(x.shape(), 1.0f));
  CHECK(g[0] == 0.0f);
  CHECK(g[1] == 0.0f);  // tie at zero
  CHECK(g[2] == 1.0f);

  Tensor neg({2, 2, 2, 2}, -3.0f);
  CHECK(l2_norm(relu(neg)) == 0.0);
  CHECK(l2_norm(relu_backward(neg, Tensor(neg.shape(), 1.0f))) == 0.0);

  std::mt19937_64 rng(5);
  const Tensor r = oracle::random_tensor({2, 3, 4, 4}, rng);
  Tensor minus = r;
  for (float& v : minus.data()) v = -v;
  const Tensor a = relu(r), b = relu(minus);
  for (std::size_t i = 0; i < r.size(); ++i) CHECK(a[i] + b[i] == std::abs(r[i]));
}

TEST_CASE("maxpool examples and tie rule") {
  const Tensor x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  const MaxPoolResult r = maxpool(x, 2, 2);
  CHECK(r.output[0] == 4.0f);

  const Tensor flat({1, 1, 4, 4}, 7.0f);
  const MaxPoolResult rf = maxpool(flat, 2, 2);
  for (float v : rf.output.data()) CHECK(v == 7.0f);
  const Tensor g = maxpool_backward(flat.shape(), rf.argmax, Tensor(rf.output.shape(), 1.0f));
  CHECK(g.at(0, 0, 0, 0) == 1.0f);
  CHECK(g.at(0, 0, 0, 1) == 0.0f);
  CHECK(g.at(0, 0, 1, 0) == 0.0f);
  CHECK(g.at(0, 0, 2, 2) == 1.0f);

  CHECK_THROWS_AS(maxpool(Tensor({1, 1, 5, 5}), 2, 2), ConfigError);
}

TEST_CASE("maxpool matches the window-scan reference and conserves gradient mass") {
  std::mt19937_64 rng(8);
  const Tensor x = oracle::random_tensor({1, 1, 8, 8}, rng);
  const MaxPoolResult r = maxpool(x, 2, 2);
  CHECK(max_abs_diff(r.output, oracle::maxpool(x, 2, 2)) == 0.0);
  const Tensor go = oracle::random_tensor(r.output.shape(), rng);
  CHECK(sum(maxpool_backward(x.shape(), r.argmax, go)) == doctest::Approx(sum(go)).epsilon(1e-6));

  const Tensor x3 = oracle::random_tensor({2, 3, 9, 9}, rng);
  CHECK(max_abs_diff(maxpool(x3, 3, 3).output, oracle::maxpool(x3, 3, 3)) == 0.0);
}

TEST_CASE("linear examples") {
  std::mt19937_64 rng(3);
  const Tensor x = oracle::random_tensor({4, 10, 1, 1}, rng);
  Tensor eye({10, 10, 1, 1});
  for (int i = 0; i < 10; ++i) eye[i * 10 + i] = 1.0f;
  CHECK(max_abs_diff(linear(x, eye, Tensor::vector(10)), x) == 0.0);

  Tensor bias = oracle::random_tensor({5, 1, 1, 1}, rng);
  const Tensor yb = linear(x, Tensor({5, 10, 1, 1}), bias);
  for (int s = 0; s < 4; ++s)
    for (int o = 0; o < 5; ++o) CHECK(yb[s * 5 + o] == bias[o]);

  const Tensor w = oracle::random_tensor({5, 10, 1, 1}, rng);
  CHECK(max_abs_diff(linear(x, w, bias), oracle::linear(x, w, bias)) < 1e-6);
  CHECK_THROWS_AS(linear(Tensor({4, 9, 1, 1}), w, bias), DimensionError);
}

TEST_CASE("batchnorm examples") {
  Tensor x({3, 2, 2, 2});
  for (int n = 0; n < 3; ++n)
    for (int i = 0; i < 4; ++i) {
      x.sample(n)[i] = 5.0f;
      x.sample(n)[4 + i] = -2.0f;
    }
  BatchNormParams p = BatchNormParams::identity(2);
  const Tensor flat_out = batchnorm(x, p, Mode::train);
  for (float v : flat_out.data()) CHECK(std::abs(v) < 1e-6);

  std::mt19937_64 rng(17);
  const Tensor r = oracle::random_tensor({4, 3, 5, 5}, rng);
  BatchNormParams q = BatchNormParams::identity(3);
  q.gamma.fill(0.0f);
  q.beta = Tensor({3, 1, 1, 1}, std::vector<float>{0.5f, -1.0f, 2.0f});
  const Tensor yb = batchnorm(r, q, Mode::train);
  for (int n = 0; n < 4; ++n)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 25; ++i) CHECK(yb.sample(n)[c * 25 + i] == q.beta[c]);

  BatchNormParams s = BatchNormParams::identity(3);
  const Tensor y = batchnorm(r, s, Mode::train);
  for (int c = 0; c < 3; ++c) {
    double m = 0.0, v = 0.0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) m += y.sample(n)[c * 25 + i];
    m /= 100.0;
    for (int n = 0; n < 4; ++n)
      for (int i = 0; i < 25; ++i) v += std::pow(y.sample(n)[c * 25 + i] - m, 2);
    v /= 100.0;
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(v - 1.0) < 1e-3);
  }
  CHECK_THROWS_AS(batchnorm(r, p, Mode::train), DimensionError);
}

TEST_CASE("batchnorm running statistics use momentum 0.1 and infer reads them") {
  std::mt19937_64 rng(4);
  const Tensor r = oracle::random_tensor({4, 1, 3, 3}, rng);
  BatchNormParams p = BatchNormParams::identity(1);
  batchnorm(r, p, Mode::train);
  double m = 0.0, v = 0.0;
  for (float e : r.data()) m += e;
  m /= 36.0;
  for (float e : r.data()) v += (e - m) * (e - m);
  CHECK(p.running_mean[0] == doctest::Approx(0.1 * m).epsilon(1e-5));
  CHECK(p.running_var[0] == doctest::Approx(0.9 + 0.1 * v / 35.0).epsilon(1e-5));
  const Tensor y = batchnorm(r, p, Mode::infer);
  const double scale = 1.0 / std::sqrt(p.running_var[0] + 1e-5);
  CHECK(y[0] == doctest::Approx((r[0] - p.running_mean[0]) * scale).epsilon(1e-5));
}

TEST_CASE("softmax cross-entropy examples") {
  const std::vector<int> labels(4, 3);
  CHECK(softmax_cross_entropy(Tensor({4, 10, 1, 1}, 0.5f), labels).loss ==
        doctest::Approx(std::log(10.0)).epsilon(1e-7));
  Tensor hot({4, 10, 1, 1});
  for (int s = 0; s < 4; ++s) hot[s * 10 + 3] = 1000.0f;
  CHECK(softmax_cross_entropy(hot, labels).loss < 1e-9);

  std::mt19937_64 rng(11);
  const Tensor z = oracle::random_tensor({8, 10, 1, 1}, rng, -2.0f, 2.0f);
  std::vector<int> y(8);
  for (int i = 0; i < 8; ++i) y[i] = (i * 7) % 10;
  const LossResult lr = softmax_cross_entropy(z, y);
  CHECK(fd_max_rel([&](const Tensor& p) { return softmax_cross_entropy(p, y).loss; }, z,
                   lr.grad_logits, 1e-2) < 1e-2);
  CHECK_THROWS_AS(softmax_cross_entropy(z, std::vector<int>(8, 10)), InputError);
  CHECK_THROWS_AS(softmax_cross_entropy(z, std::vector<int>(8, -1)), InputError);
}

TEST_CASE("grad_check on linear, bounded relu and 3x3 conv") {
  std::mt19937_64 rng(21);
  const Tensor w = oracle::random_tensor({4, 6, 1, 1}, rng);
  const Tensor b = oracle::random_tensor({4, 1, 1, 1}, rng);
  const Tensor r = oracle::random_tensor({2, 4, 1, 1}, rng);
  ScalarFunction lin{[&](const Tensor& x) { return gradsuite::dot(linear(x, w, b), r); },
                     [&](const Tensor& x) { return linear_backward(x, w, r).input; },
                     {}};
  CHECK(grad_check(lin, oracle::random_tensor({2, 6, 1, 1}, rng), 1e-2) < 1e-3);

  Tensor x = oracle::random_tensor({1, 2, 4, 4}, rng, 0.1f, 1.0f);
  for (std::size_t i = 0; i < x.size(); i += 2) x[i] = -x[i];
  const Tensor rr = oracle::random_tensor(x.shape(), rng);
  ScalarFunction rel{[&](const Tensor& p) { return gradsuite::dot(relu(p), rr); },
                     [&](const Tensor& p) { return relu_backward(p, rr); },
                     {}};
  CHECK(grad_check(rel, x, 1e-2) < 1e-3);

  const KernelBank2D bank = oracle::random_bank(2, 2, 3, 3, {}, rng);
  const Tensor rc = oracle::random_tensor({1, 2, 2, 2}, rng);
  ScalarFunction conv{[&](const Tensor& p) { return gradsuite::dot(conv2d(p, bank), rc); },
                      [&](const Tensor& p) { return conv2d_backward(p, bank, rc).input; },
                      {}};
  CHECK(grad_check(conv, oracle::random_tensor({1, 2, 4, 4}, rng), 1e-2) < 1e-2);
}

TEST_CASE("every backward passes finite differences on random shapes") {
  for (const auto& [name, err] : gradsuite::run(20, 99)) {
    INFO(name);
    CHECK(err < 1e-2);
  }
}

TEST_CASE("conv2d is linear in its input") {
  std::mt19937_64 rng(31);
  KernelBank2D b = oracle::random_bank(3, 2, 3, 3, ConvGeometry::square(1, 1), rng);
  b.bias.fill(0.0f);
  const Tensor x = oracle::random_tensor({2, 2, 6, 6}, rng);
  const Tensor y = oracle::random_tensor({2, 2, 6, 6}, rng);
  const float a = 0.7f, c = -1.3f;
  Tensor mix = x;
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * x[i] + c * y[i];
  const Tensor lhs = conv2d(mix, b), cx = conv2d(x, b), cy = conv2d(y, b);
  double worst = 0.0;
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    worst = std::max(worst, std::abs(double(lhs[i]) - (a * double(cx[i]) + c * double(cy[i]))));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("shifting the input by the stride shifts the output by one") {
  std::mt19937_64 rng(32);
  for (int s = 1; s <= 3; ++s) {
    const KernelBank2D b = oracle::random_bank(2, 1, 3, 3, ConvGeometry::square(s, 0), rng);
    const int h = 3 + 4 * s;
    const Tensor x = oracle::random_tensor({1, 1, h + s, h}, rng);
    Tensor shifted({1, 1, h, h});
    Tensor base({1, 1, h, h});
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < h; ++j) {
        base.at(0, 0, i, j) = x.at(0, 0, i, j);
        shifted.at(0, 0, i, j) = x.at(0, 0, i + s, j);
      }
    const Tensor y0 = conv2d(base, b), y1 = conv2d(shifted, b);
    for (int f = 0; f < 2; ++f)
      for (int i = 0; i + 1 < y0.shape().h; ++i)
        for (int j = 0; j < y0.shape().w; ++j) CHECK(y1.at(0, f, i, j) == y0.at(0, f, i + 1, j));
  }
}

TEST_CASE("a d x 1 bank then a 1 x d bank equals the outer-product kernel") {
  std::mt19937_64 rng(33);
  for (int d : {1, 3, 5}) {
    KernelBank2D v = oracle::random_bank(1, 1, d, 1, {}, rng);
    KernelBank2D h = oracle::random_bank(1, 1, 1, d, {}, rng);
    v.bias.fill(0.0f);
    h.bias.fill(0.0f);
    KernelBank2D full = KernelBank2D::zeros(1, 1, d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) full.weights.at(0, 0, i, j) = v.weights[i] * h.weights[j];
    const Tensor x = oracle::random_tensor({2, 1, 9, 9}, rng);
    CHECK(max_abs_diff(conv2d(conv2d(x, v), h), conv2d(x, full)) < 1e-5);
  }
}

TEST_CASE("operations keep finite inputs finite") {
  std::mt19937_64 rng(34);
  const Tensor x = oracle::random_tensor({2, 3, 6, 6}, rng, -50.0f, 50.0f);
  const KernelBank2D b = oracle::random_bank(2, 3, 3, 3, {}, rng);
  CHECK(conv2d(x, b).all_finite());
  CHECK(relu(x).all_finite());
  CHECK(tanh_forward(x).all_finite());
  CHECK(maxpool(x, 2, 2).output.all_finite());
  BatchNormParams p = BatchNormParams::identity(3);
  CHECK(batchnorm(x, p, Mode::train).all_finite());
  const LossResult l = softmax_cross_entropy(x.reshaped({2, 108, 1, 1}), std::vector<int>{0, 5});
  CHECK(std::isfinite(l.loss));
  CHECK(l.grad_logits.all_finite());
}

}  // TEST_SUITE
