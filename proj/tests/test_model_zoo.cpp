#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "decomposeme/error.hpp"
#include "decomposeme/model.hpp"
#include "oracles.hpp"

using namespace decomposeme;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string parse_error_of(const std::string& text) {
  try {
    parse_model_spec(text);
  } catch (const ParseError& e) {
    return e.what();
  } catch (const Error& e) {
    return std::string("other: ") + e.what();
  }
  return "no error";
}

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.rfind(prefix, 0) == 0;
}

ModelSpec small_chain() {
  ModelSpec s;
  s.name = "chain";
  s.input = {1, 3, 18, 18};
  s.head = HeadStyle::compact;
  s.layers = {LayerSpec::conv2d(3, 8, 3, 1, 1), LayerSpec::activation(LayerKind::relu),
              LayerSpec::conv2d(8, 8, 3, 1, 1), LayerSpec::activation(LayerKind::relu),
              LayerSpec::conv2d(8, 16, 3, 1, 1), LayerSpec::activation(LayerKind::relu),
              LayerSpec::conv2d(16, 16, 3, 1, 1), LayerSpec::maxpool(2, 2),
              LayerSpec::conv2d(16, 16, 3, 2, 1)};
  return s;
}

}  // namespace

TEST_SUITE("model-zoo") {

TEST_CASE("fixture documents round-trip to their canonical form") {
  int seen = 0;
  for (const auto& entry : fs::directory_iterator(fs::path(FIXTURE_DIR) / "specs")) {
    const std::string file = entry.path().filename().string();
    if (file.find(".canonical.") != std::string::npos) continue;
    const fs::path golden =
        entry.path().parent_path() / (entry.path().stem().string() + ".canonical.json");
    CAPTURE(file);
    REQUIRE(fs::exists(golden));
    const ModelSpec spec = parse_model_spec(slurp(entry.path()));
    CHECK(serialize_model_spec(spec) == slurp(golden));
    // The canonical form is a fixed point.
    CHECK(parse_model_spec(slurp(golden)) == spec);
    ++seen;
  }
  CHECK(seen == 10);
}

TEST_CASE("schema violations carry a JSON pointer") {
  const std::string ok_layer = R"({"kind":"conv2d","in":1,"out":2,"k":3})";
  auto doc = [&](const std::string& layers, const std::string& extra = "") {
    return R"({"name":"x","input_shape":[1,8,8],)" + extra + R"("layers":[)" + layers + "]}";
  };
  CHECK(starts_with(parse_error_of(doc(ok_layer + R"(,{"kind":"conv2d","in":2,"out":2,"k":"3"})")),
                    "/layers/1/k"));
  CHECK(starts_with(parse_error_of(doc(R"({"kind":"conv2d","in":1,"out":2,"k":3,"dilation":2})")),
                    "/layers/0"));
  CHECK(starts_with(parse_error_of(doc(R"({"kind":"warp"})")), "/layers/0/kind"));
  CHECK(starts_with(parse_error_of(doc(ok_layer, R"("colour":"red",)")), "/"));
  CHECK(starts_with(parse_error_of(doc(ok_layer, R"("num_classes":-3,)")), "/num_classes"));
  CHECK(starts_with(parse_error_of(doc(ok_layer, R"("head":"tiny",)")), "/head"));
  CHECK(starts_with(parse_error_of(R"({"name":"x","input_shape":[1,8],"layers":[]})"),
                    "/input_shape"));
  CHECK(starts_with(parse_error_of(R"({"name":"x","input_shape":[1,8,8])"), "/"));
  CHECK(starts_with(parse_error_of(R"([1,2,3])"), "/"));
  CHECK(starts_with(parse_error_of(doc(R"({"kind":"decomposed","in":1,"L":0,"out":2,"k":3})")),
                    "/layers/0/L"));
  CHECK(starts_with(
      parse_error_of(doc(R"({"kind":"decomposed","in":1,"L":2,"out":2,"k":3,"nl":"gelu"})")),
      "/layers/0/nl"));
  // Unknown keys name the key itself.
  CHECK(parse_error_of(doc(R"({"kind":"relu","slope":0.1})")).find("slope") != std::string::npos);
}

TEST_CASE("semantic problems are validation errors") {
  const std::string conv = R"({"kind":"conv2d","in":1,"out":2,"k":3})";
  auto doc = [](const std::string& layers) {
    return R"({"name":"x","input_shape":[1,8,8],"layers":[)" + layers + "]}";
  };
  CHECK_THROWS_AS(parse_model_spec(doc("")), ValidationError);
  CHECK_THROWS_AS(parse_model_spec(doc(conv + R"(,{"kind":"conv2d","in":3,"out":2,"k":3})")),
                  ValidationError);
  CHECK_THROWS_AS(parse_model_spec(doc(R"({"kind":"conv2d","in":1,"out":2,"k":9})")),
                  ValidationError);
  ModelSpec s = small_chain();
  s.num_classes = 0;
  CHECK_THROWS_AS(validate(s), ValidationError);
}

TEST_CASE("built-in lenet has two 5x5 convs, pools and a full head") {
  const ModelSpec s = *builtin_model("lenet");
  int convs = 0, pools = 0;
  for (const LayerSpec& l : s.layers) {
    if (l.kind == LayerKind::conv2d) {
      ++convs;
      CHECK(l.kernel == 5);
    }
    if (l.kind == LayerKind::maxpool) ++pools;
  }
  CHECK(convs == 2);
  CHECK(pools == 2);
  CHECK(s.head == HeadStyle::full);
  CHECK(s.input == Shape{1, 1, 28, 28});
  CHECK(conv_param_count(s) == 25570);
}

TEST_CASE("every required built-in resolves and matches its shipped config") {
  for (const char* name : {"lenet", "lenet-dec1", "lenet-dec2", "lenet-dec2k9", "cifar10-quick",
                           "cifar10-quick-dec1", "cifar10-quick-dec3"}) {
    CAPTURE(name);
    CHECK(builtin_model(name).has_value());
  }
  for (const std::string& name : builtin_model_names()) {
    CAPTURE(name);
    const ModelSpec s = *builtin_model(name);
    CHECK(s.name == name);
    CHECK_NOTHROW(validate(s));
    const fs::path file = fs::path(CONFIG_DIR) / (name + ".json");
    REQUIRE(fs::exists(file));
    CHECK(parse_model_spec(slurp(file)) == s);
    CHECK(resolve_model(file.string()) == s);
    CHECK(resolve_model(name) == s);
  }
  CHECK_FALSE(builtin_model("resnet").has_value());
  CHECK_THROWS_AS(resolve_model("no-such-model"), Error);
}

TEST_CASE("decomposed built-ins shrink the conv stack when more than one layer is decomposed") {
  const std::map<std::string, std::string> pairs{
      {"lenet-dec2", "lenet"},          {"lenet-dec2k9", "lenet9"},
      {"cifar10-quick-dec3", "cifar10-quick"}, {"vgg-b-dec8-compact-avg", "vgg-b"},
      {"alexnet-owtbn-dec4", "alexnet-owtbn"}};
  for (const auto& [dec, base] : pairs) {
    CAPTURE(dec);
    CHECK(conv_param_count(*builtin_model(dec)) < conv_param_count(*builtin_model(base)));
  }
  // Two decomposed lenet layers: at least half the conv parameters go.
  CHECK(conv_param_count(*builtin_model("lenet-dec2")) * 2 <=
        conv_param_count(*builtin_model("lenet")));
}

TEST_CASE("decompose_model") {
  const ModelSpec lenet = *builtin_model("lenet");
  CHECK(decompose_model(lenet, {}) == lenet);

  ModelSpec big;
  big.input = {1, 256, 14, 14};
  big.head = HeadStyle::compact;
  big.layers = {LayerSpec::conv2d(256, 256, 3, 1, 1)};
  CHECK(conv_param_count(big) == 590080);
  const ModelSpec d = decompose_model(big, {0});
  CHECK(d.layers[0].kind == LayerKind::decomposed);
  CHECK(d.layers[0].width == 256);
  CHECK(d.layers[0].nl == Nonlinearity::relu);
  // L*C*d + L + F*L*d + F.
  CHECK(conv_param_count(d) == 393728);

  const ModelSpec both = decompose_model(lenet, {0, 3});
  CHECK(conv_param_count(both) < conv_param_count(lenet));
  CHECK(total_param_count(both) < total_param_count(lenet));
  const ModelSpec explicit_l = decompose_model(lenet, {0, 3}, LPolicy::explicit_widths({{0, 20}, {3, 25}}));
  CHECK(explicit_l.layers == builtin_model("lenet-dec2")->layers);
  // The untouched layer is left exactly as it was.
  const ModelSpec one = decompose_model(lenet, {3});
  CHECK(one.layers[0] == lenet.layers[0]);

  CHECK_THROWS_AS(decompose_model(lenet, {1}), InputError);
  CHECK_THROWS_AS(decompose_model(lenet, {17}), InputError);
  CHECK_THROWS_AS(decompose_model(lenet, {-1}), InputError);
  CHECK_THROWS_AS(decompose_model(lenet, {0}, LPolicy::explicit_widths({{3, 4}})), InputError);
}

TEST_CASE("decompose_model preserves every layer's output shape") {
  for (const std::string& name : {std::string("lenet"), std::string("cifar10-quick"),
                                  std::string("cifar10-quick5"), std::string("vgg-b")}) {
    CAPTURE(name);
    const ModelSpec base = *builtin_model(name);
    std::set<int> convs;
    for (std::size_t i = 0; i < base.layers.size(); ++i)
      if (base.layers[i].kind == LayerKind::conv2d) convs.insert(int(i));
    const ModelSpec dec = decompose_model(base, convs);
    CHECK(layer_shapes(dec) == layer_shapes(base));
  }
  // And the same on an actual forward pass.
  const ModelSpec base = *builtin_model("cifar10-quick");
  const ModelSpec dec = decompose_model(base, {0, 3, 6});
  Model a = Model::instantiate(base, InitScheme::kaiming, 1);
  Model b = Model::instantiate(dec, InitScheme::kaiming, 1);
  std::mt19937_64 rng(3);
  Tensor x = oracle::random_tensor({2, 3, 32, 32}, rng);
  for (std::size_t i = 0; i < base.layers.size(); ++i) {
    const Tensor ya = a.layer(i).forward(x, Mode::infer);
    const Tensor yb = b.layer(i).forward(x, Mode::infer);
    CHECK(ya.shape() == yb.shape());
    x = ya;
  }
}

TEST_CASE("fuse_consecutive") {
  const ModelSpec s = small_chain();
  const ModelSpec f4 = fuse_consecutive(s, 0, 6);
  REQUIRE(f4.layers[0].kind == LayerKind::decomposed);
  CHECK(f4.layers[0].kernel == 9);
  CHECK(f4.layers[0].pad == 4);
  CHECK(f4.layers[0].width == 16);
  CHECK(f4.layers[0].in == 3);
  CHECK(f4.layers[0].out == 16);
  CHECK(receptive_field(f4, 0) == 9);
  CHECK(receptive_field(s, 6) == 9);
  CHECK(layer_shapes(f4).back() == layer_shapes(s).back());

  const ModelSpec f2 = fuse_consecutive(s, 0, 2);
  CHECK(f2.layers[0].kernel == 5);
  CHECK(receptive_field(f2, 0) == receptive_field(s, 2));

  const ModelSpec f1 = fuse_consecutive(s, 2, 2);
  CHECK(f1.layers[2].kernel == 3);

  CHECK_THROWS_AS(fuse_consecutive(s, 6, 8), InputError);  // contains a pool and a stride-2 conv
  CHECK_THROWS_AS(fuse_consecutive(s, 8, 8), InputError);  // strided
  CHECK_THROWS_AS(fuse_consecutive(s, 3, 1), InputError);
  CHECK_THROWS_AS(fuse_consecutive(s, 0, 40), InputError);
  CHECK_THROWS_AS(fuse_consecutive(s, 1, 2), InputError);  // starts on an activation
}

TEST_CASE("fusion preserves receptive field on random stride-1 stacks") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 30; ++t) {
    ModelSpec s;
    s.input = {1, 2, 40, 40};
    s.head = HeadStyle::compact;
    const int n = std::uniform_int_distribution<int>(1, 4)(rng);
    int c = 2;
    for (int i = 0; i < n; ++i) {
      const int k = 1 + 2 * std::uniform_int_distribution<int>(0, 2)(rng);
      s.layers.push_back(LayerSpec::conv2d(c, c + 1, k, 1, k / 2));
      ++c;
      if (i + 1 < n && rng() % 2) s.layers.push_back(LayerSpec::activation(LayerKind::relu));
    }
    const int last = int(s.layers.size()) - 1;
    const ModelSpec f = fuse_consecutive(s, 0, last);
    CHECK(receptive_field(f, 0) == receptive_field(s, last));
    CHECK(layer_shapes(f).back() == layer_shapes(s).back());
  }
}

TEST_CASE("receptive_field") {
  ModelSpec one;
  one.input = {1, 1, 28, 28};
  one.layers = {LayerSpec::conv2d(1, 4, 5)};
  CHECK(receptive_field(one, 0) == 5);

  ModelSpec three;
  three.input = {1, 1, 28, 28};
  three.layers = {LayerSpec::conv2d(1, 4, 3), LayerSpec::maxpool(2, 2), LayerSpec::conv2d(4, 4, 3)};
  // r <- r + (k-1) * jump over the three layers: 3, 4, 8.
  CHECK(receptive_field(three, 2) == 8);
  CHECK(receptive_field(three, 2) == oracle::interval_receptive_field(three, 2));
  CHECK_THROWS_AS(receptive_field(three, 3), InputError);
  CHECK_THROWS_AS(receptive_field(three, -1), InputError);

  for (const std::string& name : builtin_model_names()) {
    const ModelSpec s = *builtin_model(name);
    for (int i = 0; i < int(s.layers.size()); ++i) {
      CAPTURE(name);
      CAPTURE(i);
      CHECK(receptive_field(s, i) == oracle::interval_receptive_field(s, i));
    }
  }
}

TEST_CASE("instantiate is deterministic and follows the initialisers") {
  const ModelSpec spec = *builtin_model("lenet-dec2");
  for (InitScheme scheme : {InitScheme::xavier, InitScheme::kaiming}) {
    Model a = Model::instantiate(spec, scheme, 9);
    Model b = Model::instantiate(spec, scheme, 9);
    Model c = Model::instantiate(spec, scheme, 10);
    auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    REQUIRE(pa.size() == pb.size());
    bool differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i)
      for (std::size_t j = 0; j < pa[i].tensors.size(); ++j) {
        const Tensor& x = *pa[i].tensors[j].value;
        CHECK(max_abs_diff(x, *pb[i].tensors[j].value) == 0.0);
        differs |= max_abs_diff(x, *pc[i].tensors[j].value) > 0.0;
        if (pa[i].tensors[j].name.rfind("bias", 0) == 0) {
          for (float v : x.data()) CHECK(v == 0.0f);
        }
      }
    CHECK(differs);
  }
}

TEST_CASE("kaiming and xavier sample statistics") {
  ModelSpec s;
  s.input = {1, 8, 16, 16};
  s.head = HeadStyle::compact;
  s.layers = {LayerSpec::conv2d(8, 200, 3)};  // 14,400 weights
  Model m = Model::instantiate(s, InitScheme::kaiming, 4);
  const Tensor& w = *m.parameters()[0].tensors[0].value;
  REQUIRE(w.size() >= 10000);
  double sum = 0.0, sq = 0.0;
  for (float v : w.data()) {
    sum += v;
    sq += double(v) * v;
  }
  const double mean = sum / w.size();
  const double sd = std::sqrt(sq / w.size() - mean * mean);
  CHECK(std::abs(sd / std::sqrt(2.0 / 72.0) - 1.0) < 0.1);

  Model x = Model::instantiate(s, InitScheme::xavier, 4);
  const Tensor& wx = *x.parameters()[0].tensors[0].value;
  const double bound = std::sqrt(6.0 / (72.0 + 200.0 * 9.0));
  float lo = 1e9f, hi = -1e9f;
  for (float v : wx.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(hi <= bound);
  CHECK(lo >= -bound);
  CHECK(hi > 0.95 * bound);

  // 1D banks use their own fan-in: C*d vertically, L*d horizontally.
  ModelSpec d;
  d.input = {1, 16, 16, 16};
  d.head = HeadStyle::compact;
  d.layers = {LayerSpec::decomposed(16, 256, 256, 3)};
  Model md = Model::instantiate(d, InitScheme::kaiming, 5);
  auto stddev = [](const Tensor& t) {
    double q = 0.0;
    for (float v : t.data()) q += double(v) * v;
    return std::sqrt(q / t.size());
  };
  const auto params = md.parameters()[0].tensors;
  CHECK(std::abs(stddev(*params[0].value) / std::sqrt(2.0 / 48.0) - 1.0) < 0.1);
  CHECK(std::abs(stddev(*params[1].value) / std::sqrt(2.0 / 768.0) - 1.0) < 0.1);
}

TEST_CASE("heads") {
  ModelSpec s = small_chain();
  s.head = HeadStyle::compact;
  auto tail = expanded_layers(s);
  CHECK(tail.size() == s.layers.size() + 1);
  CHECK(tail.back().kind == LayerKind::linear);
  CHECK(tail.back().out == 10);

  s.head = HeadStyle::compact_avg;
  tail = expanded_layers(s);
  CHECK(tail.size() == s.layers.size() + 2);
  CHECK(tail[tail.size() - 2].kind == LayerKind::avgpool_global);

  s.head = HeadStyle::full;
  s.head_hidden = {64, 32};
  tail = expanded_layers(s);
  CHECK(tail.size() == s.layers.size() + 5);
  CHECK(tail[s.layers.size()].out == 64);
  CHECK(tail[s.layers.size() + 2].out == 32);
  CHECK(layer_shapes(s).back() == Shape{1, 10, 1, 1});
}

}  // TEST_SUITE
