#include "decomposeme/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "decomposeme/error.hpp"

namespace decomposeme {

using nlohmann::json;

std::string to_string(HeadStyle h) {
  switch (h) {
    case HeadStyle::full: return "full";
    case HeadStyle::compact: return "compact";
    case HeadStyle::compact_avg: return "compact_avg";
  }
  return "?";
}

HeadStyle parse_head(const std::string& s) {
  if (s == "full") return HeadStyle::full;
  if (s == "compact") return HeadStyle::compact;
  if (s == "compact_avg") return HeadStyle::compact_avg;
  throw ParseError("unknown head '" + s + "' (full|compact|compact_avg)");
}

std::string to_string(InitScheme s) {
  return s == InitScheme::xavier ? "xavier" : "kaiming";
}

InitScheme parse_init(const std::string& s) {
  if (s == "xavier") return InitScheme::xavier;
  if (s == "kaiming") return InitScheme::kaiming;
  throw ParseError("unknown init scheme '" + s + "' (xavier|kaiming)");
}

std::vector<LayerSpec> expanded_layers(const ModelSpec& spec) {
  std::vector<LayerSpec> out = spec.layers;
  switch (spec.head) {
    case HeadStyle::full:
      for (int u : spec.head_hidden) {
        out.push_back(LayerSpec::linear(u));
        out.push_back(LayerSpec::activation(LayerKind::relu));
      }
      break;
    case HeadStyle::compact: break;
    case HeadStyle::compact_avg: out.push_back(LayerSpec::avgpool_global()); break;
  }
  out.push_back(LayerSpec::linear(spec.num_classes));
  return out;
}

namespace {

void check_layer_values(const LayerSpec& l, std::size_t i) {
  auto fail = [&](const std::string& what) {
    throw ValidationError("layer " + std::to_string(i) + " (" + to_string(l.kind) +
                          "): " + what);
  };
  switch (l.kind) {
    case LayerKind::decomposed:
      if (l.width < 1) fail("L must be >= 1");
      [[fallthrough]];
    case LayerKind::conv2d:
      if (l.in < 1 || l.out < 1 || l.kernel < 1) fail("in, out and k must be >= 1");
      if (l.stride < 1 || l.pad < 0) fail("stride must be >= 1 and pad >= 0");
      break;
    case LayerKind::maxpool:
      if (l.kernel < 1 || l.stride < 1) fail("k and stride must be >= 1");
      break;
    case LayerKind::linear:
      if (l.out < 1) fail("out must be >= 1");
      break;
    default: break;
  }
}

}  // namespace

std::vector<Shape> layer_shapes(const ModelSpec& spec) {
  std::vector<Shape> shapes;
  Shape cur{1, spec.input.c, spec.input.h, spec.input.w};
  const std::vector<LayerSpec> all = expanded_layers(spec);
  for (std::size_t i = 0; i < all.size(); ++i) {
    check_layer_values(all[i], i);
    try {
      cur = layer_output_shape(all[i], cur);
    } catch (const ValidationError& e) {
      throw ValidationError("layer " + std::to_string(i) + ": " + e.what());
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void validate(const ModelSpec& spec) {
  if (spec.layers.empty()) throw ValidationError("model '" + spec.name + "' has no layers");
  if (spec.input.c < 1 || spec.input.h < 1 || spec.input.w < 1) {
    throw ValidationError("input_shape must be positive");
  }
  if (spec.num_classes < 1) throw ValidationError("num_classes must be >= 1");
  for (int u : spec.head_hidden) {
    if (u < 1) throw ValidationError("head_hidden widths must be >= 1");
  }
  layer_shapes(spec);
}

// ---------------------------------------------------------------------------
// JSON

namespace {

std::string child(const std::string& path, const std::string& key) {
  return path + "/" + key;
}

[[noreturn]] void schema_error(const std::string& path, const std::string& what) {
  throw ParseError((path.empty() ? std::string("/") : path) + ": " + what);
}

void reject_unknown(const json& obj, const std::string& path,
                    std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) schema_error(child(path, it.key()), "unknown key");
  }
}

int read_int(const json& obj, const std::string& path, const char* key,
             std::optional<int> fallback, int min_value) {
  const auto it = obj.find(key);
  const std::string p = child(path, key);
  if (it == obj.end()) {
    if (!fallback) schema_error(p, "required");
    return *fallback;
  }
  if (!it->is_number_integer()) schema_error(p, "expected an integer");
  const auto v = it->get<long long>();
  if (v < min_value || v > 1'000'000'000) {
    schema_error(p, "must be >= " + std::to_string(min_value));
  }
  return static_cast<int>(v);
}

std::string read_string(const json& obj, const std::string& path, const char* key,
                        std::optional<std::string> fallback) {
  const auto it = obj.find(key);
  const std::string p = child(path, key);
  if (it == obj.end()) {
    if (!fallback) schema_error(p, "required");
    return *fallback;
  }
  if (!it->is_string()) schema_error(p, "expected a string");
  return it->get<std::string>();
}

template <typename Parse>
auto read_enum(const json& obj, const std::string& path, const char* key,
               const std::string& fallback, Parse parse) {
  const std::string s = read_string(obj, path, key, fallback);
  try {
    return parse(s);
  } catch (const ParseError& e) {
    schema_error(child(path, key), e.what());
  }
}

KernelOrder parse_order(const std::string& s) {
  if (s == "vertical_first") return KernelOrder::vertical_first;
  if (s == "horizontal_first") return KernelOrder::horizontal_first;
  throw ParseError("unknown order '" + s + "' (vertical_first|horizontal_first)");
}

std::string order_name(KernelOrder o) {
  return o == KernelOrder::vertical_first ? "vertical_first" : "horizontal_first";
}

LayerSpec parse_layer(const json& j, const std::string& path) {
  if (!j.is_object()) schema_error(path, "expected an object");
  const std::string kind = read_string(j, path, "kind", std::nullopt);
  LayerSpec l;
  if (kind == "conv2d") {
    reject_unknown(j, path, {"kind", "in", "out", "k", "stride", "pad"});
    l = LayerSpec::conv2d(read_int(j, path, "in", {}, 1), read_int(j, path, "out", {}, 1),
                          read_int(j, path, "k", {}, 1), read_int(j, path, "stride", 1, 1),
                          read_int(j, path, "pad", 0, 0));
  } else if (kind == "decomposed") {
    reject_unknown(j, path,
                   {"kind", "in", "L", "out", "k", "stride", "pad", "nl", "order", "mid_norm"});
    l = LayerSpec::decomposed(
        read_int(j, path, "in", {}, 1), read_int(j, path, "L", {}, 1),
        read_int(j, path, "out", {}, 1), read_int(j, path, "k", {}, 1),
        read_enum(j, path, "nl", "relu", parse_nonlinearity),
        read_int(j, path, "stride", 1, 1), read_int(j, path, "pad", 0, 0));
    l.order = read_enum(j, path, "order", "vertical_first", parse_order);
    if (const auto it = j.find("mid_norm"); it != j.end()) {
      if (!it->is_boolean()) schema_error(child(path, "mid_norm"), "expected a boolean");
      l.mid_norm = it->get<bool>();
    }
  } else if (kind == "maxpool") {
    reject_unknown(j, path, {"kind", "k", "stride"});
    const int k = read_int(j, path, "k", {}, 1);
    l = LayerSpec::maxpool(k, read_int(j, path, "stride", k, 1));
  } else if (kind == "linear") {
    reject_unknown(j, path, {"kind", "out"});
    l = LayerSpec::linear(read_int(j, path, "out", {}, 1));
  } else if (kind == "relu" || kind == "tanh" || kind == "batchnorm" ||
             kind == "avgpool_global") {
    reject_unknown(j, path, {"kind"});
    l = LayerSpec::activation(kind == "relu"        ? LayerKind::relu
                              : kind == "tanh"      ? LayerKind::tanh
                              : kind == "batchnorm" ? LayerKind::batchnorm
                                                    : LayerKind::avgpool_global);
  } else {
    schema_error(child(path, "kind"), "unknown layer kind '" + kind + "'");
  }
  return l;
}

json layer_json(const LayerSpec& l) {
  json j;
  j["kind"] = to_string(l.kind);
  switch (l.kind) {
    case LayerKind::conv2d:
      j["in"] = l.in;
      j["out"] = l.out;
      j["k"] = l.kernel;
      j["stride"] = l.stride;
      j["pad"] = l.pad;
      break;
    case LayerKind::decomposed:
      j["in"] = l.in;
      j["L"] = l.width;
      j["out"] = l.out;
      j["k"] = l.kernel;
      j["stride"] = l.stride;
      j["pad"] = l.pad;
      j["nl"] = to_string(l.nl);
      j["order"] = order_name(l.order);
      j["mid_norm"] = l.mid_norm;
      break;
    case LayerKind::maxpool:
      j["k"] = l.kernel;
      j["stride"] = l.stride;
      break;
    case LayerKind::linear: j["out"] = l.out; break;
    default: break;
  }
  return j;
}

}  // namespace

ModelSpec parse_model_spec(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw ParseError("/: malformed JSON at byte " + std::to_string(e.byte));
  }
  if (!doc.is_object()) schema_error("", "expected an object");
  reject_unknown(doc, "",
                 {"name", "input_shape", "num_classes", "head", "head_hidden", "layers"});
  ModelSpec spec;
  spec.name = read_string(doc, "", "name", std::nullopt);

  const auto shape = doc.find("input_shape");
  if (shape == doc.end()) schema_error("/input_shape", "required");
  if (!shape->is_array() || shape->size() != 3) {
    schema_error("/input_shape", "expected [C, H, W]");
  }
  int dims[3];
  for (int i = 0; i < 3; ++i) {
    const json& v = (*shape)[i];
    const std::string p = "/input_shape/" + std::to_string(i);
    if (!v.is_number_integer() || v.get<long long>() < 1 || v.get<long long>() > 1'000'000) {
      schema_error(p, "expected a positive integer");
    }
    dims[i] = v.get<int>();
  }
  spec.input = {1, dims[0], dims[1], dims[2]};
  spec.num_classes = read_int(doc, "", "num_classes", 10, 1);
  spec.head = read_enum(doc, "", "head", "full", parse_head);
  if (const auto it = doc.find("head_hidden"); it != doc.end()) {
    if (!it->is_array()) schema_error("/head_hidden", "expected an array");
    spec.head_hidden.clear();
    for (std::size_t i = 0; i < it->size(); ++i) {
      const json& v = (*it)[i];
      if (!v.is_number_integer() || v.get<long long>() < 1) {
        schema_error("/head_hidden/" + std::to_string(i), "expected a positive integer");
      }
      spec.head_hidden.push_back(v.get<int>());
    }
  }
  const auto layers = doc.find("layers");
  if (layers == doc.end()) schema_error("/layers", "required");
  if (!layers->is_array()) schema_error("/layers", "expected an array");
  for (std::size_t i = 0; i < layers->size(); ++i) {
    spec.layers.push_back(parse_layer((*layers)[i], "/layers/" + std::to_string(i)));
  }
  validate(spec);
  return spec;
}

std::string serialize_model_spec(const ModelSpec& spec) {
  json doc;
  doc["name"] = spec.name;
  doc["input_shape"] = {spec.input.c, spec.input.h, spec.input.w};
  doc["num_classes"] = spec.num_classes;
  doc["head"] = to_string(spec.head);
  doc["head_hidden"] = spec.head_hidden;
  json layers = json::array();
  for (const LayerSpec& l : spec.layers) layers.push_back(layer_json(l));
  doc["layers"] = std::move(layers);
  return doc.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Built-in zoo

namespace {

LayerSpec relu_l() { return LayerSpec::activation(LayerKind::relu); }

ModelSpec lenet_body(const std::string& name, int k, int pad) {
  ModelSpec s;
  s.name = name;
  s.input = {1, 1, 28, 28};
  s.layers = {LayerSpec::conv2d(1, 20, k, 1, pad), relu_l(), LayerSpec::maxpool(2, 2),
              LayerSpec::conv2d(20, 50, k, 1, pad), relu_l(), LayerSpec::maxpool(2, 2)};
  s.head = HeadStyle::full;
  s.head_hidden = {500};
  s.num_classes = 10;
  return s;
}

// LeNet layer indices of the two convs are 0 and 3. Decomposed variants keep
// L = 20 on the first layer and use L = 25 on the second.
ModelSpec lenet_decomposed(const std::string& name, int k, int pad, bool both,
                           Nonlinearity nl) {
  ModelSpec base = lenet_body(name, k, pad);
  std::map<int, int> widths{{0, 20}};
  std::set<int> idx{0};
  if (both) {
    widths[3] = 25;
    idx.insert(3);
  }
  ModelSpec s = decompose_model(base, idx, LPolicy::explicit_widths(widths));
  for (LayerSpec& l : s.layers) {
    if (l.kind == LayerKind::decomposed) l.nl = nl;
  }
  s.name = name;
  return s;
}

ModelSpec cifar_quick(const std::string& name) {
  ModelSpec s;
  s.name = name;
  s.input = {1, 3, 32, 32};
  s.layers = {LayerSpec::conv2d(3, 32, 5, 1, 2),  LayerSpec::maxpool(2, 2), relu_l(),
              LayerSpec::conv2d(32, 32, 5, 1, 2), relu_l(), LayerSpec::maxpool(2, 2),
              LayerSpec::conv2d(32, 64, 5, 1, 2), relu_l(), LayerSpec::maxpool(2, 2)};
  s.head_hidden = {64};
  return s;
}

ModelSpec cifar_quick5() {
  ModelSpec s;
  s.name = "cifar10-quick5";
  s.input = {1, 3, 32, 32};
  s.layers = {LayerSpec::conv2d(3, 32, 5, 1, 2),  relu_l(),
              LayerSpec::conv2d(32, 32, 5, 1, 2), relu_l(), LayerSpec::maxpool(2, 2),
              LayerSpec::conv2d(32, 64, 5, 1, 2), relu_l(),
              LayerSpec::conv2d(64, 64, 5, 1, 2), relu_l(), LayerSpec::maxpool(2, 2),
              LayerSpec::conv2d(64, 64, 5, 1, 2), relu_l(), LayerSpec::maxpool(2, 2)};
  s.head_hidden = {64};
  return s;
}

std::set<int> conv_indices(const ModelSpec& s, std::size_t skip_first = 0) {
  std::set<int> out;
  std::size_t seen = 0;
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    if (s.layers[i].kind == LayerKind::conv2d && seen++ >= skip_first) {
      out.insert(static_cast<int>(i));
    }
  }
  return out;
}

ModelSpec vgg_b(const std::string& name, HeadStyle head) {
  ModelSpec s;
  s.name = name;
  s.input = {1, 3, 224, 224};
  int c = 3;
  for (int width : {64, 128, 256, 512, 512}) {
    for (int rep = 0; rep < 2; ++rep) {
      s.layers.push_back(LayerSpec::conv2d(c, width, 3, 1, 1));
      s.layers.push_back(relu_l());
      c = width;
    }
    s.layers.push_back(LayerSpec::maxpool(2, 2));
  }
  s.head = head;
  s.head_hidden = {4096, 4096};
  s.num_classes = 1000;
  return s;
}

ModelSpec alexnet_owtbn() {
  ModelSpec s;
  s.name = "alexnet-owtbn";
  s.input = {1, 3, 227, 227};
  auto block = [&](LayerSpec conv, bool pool) {
    s.layers.push_back(conv);
    s.layers.push_back(LayerSpec::batchnorm());
    s.layers.push_back(relu_l());
    if (pool) s.layers.push_back(LayerSpec::maxpool(3, 2));
  };
  block(LayerSpec::conv2d(3, 64, 11, 4, 0), true);
  block(LayerSpec::conv2d(64, 192, 5, 1, 2), true);
  block(LayerSpec::conv2d(192, 384, 3, 1, 1), false);
  block(LayerSpec::conv2d(384, 256, 3, 1, 1), false);
  block(LayerSpec::conv2d(256, 256, 3, 1, 1), true);
  s.head_hidden = {4096, 4096};
  s.num_classes = 1000;
  return s;
}

ModelSpec renamed(ModelSpec s, const std::string& name) {
  s.name = name;
  return s;
}

ModelSpec make_builtin(const std::string& name) {
  if (name == "lenet") return lenet_body(name, 5, 0);
  if (name == "lenet9") return lenet_body(name, 9, 2);
  if (name == "lenet-dec1") return lenet_decomposed(name, 5, 0, false, Nonlinearity::relu);
  if (name == "lenet-dec2") return lenet_decomposed(name, 5, 0, true, Nonlinearity::relu);
  if (name == "lenet-dec2k9") return lenet_decomposed(name, 9, 2, true, Nonlinearity::relu);
  if (name == "lenet-dec2-tanh") {
    return lenet_decomposed(name, 5, 0, true, Nonlinearity::tanh);
  }
  if (name == "cifar10-quick") return cifar_quick(name);
  if (name == "cifar10-quick5") return cifar_quick5();
  if (name == "cifar10-quick-dec1") {
    const ModelSpec b = cifar_quick(name);
    return renamed(decompose_model(b, {*conv_indices(b).begin()}), name);
  }
  if (name == "cifar10-quick-dec3") {
    const ModelSpec b = cifar_quick(name);
    return renamed(decompose_model(b, conv_indices(b)), name);
  }
  if (name == "vgg-b") return vgg_b(name, HeadStyle::full);
  if (name == "vgg-b-compact") return vgg_b(name, HeadStyle::compact);
  if (name == "vgg-b-dec8-compact-avg") {
    const ModelSpec b = vgg_b(name, HeadStyle::compact_avg);
    return renamed(decompose_model(b, conv_indices(b, 2)), name);
  }
  if (name == "alexnet-owtbn") return alexnet_owtbn();
  if (name == "alexnet-owtbn-dec4") {
    const ModelSpec b = alexnet_owtbn();
    return renamed(decompose_model(b, conv_indices(b, 1)), name);
  }
  throw InputError("unknown built-in model '" + name + "'");
}

}  // namespace

const std::vector<std::string>& builtin_model_names() {
  static const std::vector<std::string> names{
      "lenet",          "lenet9",         "lenet-dec1",          "lenet-dec2",
      "lenet-dec2k9",   "lenet-dec2-tanh", "cifar10-quick",      "cifar10-quick5",
      "cifar10-quick-dec1", "cifar10-quick-dec3", "vgg-b",       "vgg-b-compact",
      "vgg-b-dec8-compact-avg", "alexnet-owtbn", "alexnet-owtbn-dec4"};
  return names;
}

std::optional<ModelSpec> builtin_model(const std::string& name) {
  const auto& names = builtin_model_names();
  if (std::find(names.begin(), names.end(), name) == names.end()) return std::nullopt;
  ModelSpec s = make_builtin(name);
  validate(s);
  return s;
}

ModelSpec resolve_model(const std::string& name_or_path) {
  if (auto s = builtin_model(name_or_path)) return *s;
  std::ifstream in(name_or_path, std::ios::binary);
  if (!in) {
    throw IoError("'" + name_or_path + "' is neither a built-in model nor a readable file");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_model_spec(ss.str());
}

// ---------------------------------------------------------------------------
// Transforms

ModelSpec decompose_model(const ModelSpec& spec, const std::set<int>& indices,
                          const LPolicy& policy) {
  ModelSpec out = spec;
  for (int i : indices) {
    if (i < 0 || i >= static_cast<int>(spec.layers.size())) {
      throw InputError("decompose_model: layer index " + std::to_string(i) +
                       " out of range [0, " + std::to_string(spec.layers.size()) + ")");
    }
    const LayerSpec& l = spec.layers[i];
    if (l.kind != LayerKind::conv2d) {
      throw InputError("decompose_model: layer " + std::to_string(i) + " is " +
                       to_string(l.kind) + ", not conv2d");
    }
    int width = l.out;
    if (policy.kind == LPolicy::Kind::explicit_map) {
      const auto it = policy.widths.find(i);
      if (it == policy.widths.end()) {
        throw InputError("decompose_model: no L given for layer " + std::to_string(i));
      }
      if (it->second < 1) throw InputError("decompose_model: L must be >= 1");
      width = it->second;
    }
    out.layers[i] = LayerSpec::decomposed(l.in, width, l.out, l.kernel,
                                          Nonlinearity::relu, l.stride, l.pad);
  }
  return out;
}

ModelSpec fuse_consecutive(const ModelSpec& spec, int first, int last) {
  const int n = static_cast<int>(spec.layers.size());
  if (first < 0 || last >= n || first > last) {
    throw InputError("fuse_consecutive: range [" + std::to_string(first) + ", " +
                     std::to_string(last) + "] invalid for " + std::to_string(n) +
                     " layers");
  }
  if (spec.layers[first].kind != LayerKind::conv2d ||
      spec.layers[last].kind != LayerKind::conv2d) {
    throw InputError("fuse_consecutive: group must start and end on a conv2d layer");
  }
  int in = -1, out = -1, kernel = 1, pad = 0;
  for (int i = first; i <= last; ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind == LayerKind::relu || l.kind == LayerKind::tanh) continue;
    if (l.kind != LayerKind::conv2d) {
      throw InputError("fuse_consecutive: layer " + std::to_string(i) + " is " +
                       to_string(l.kind) + "; group must hold conv2d layers only");
    }
    if (l.stride != 1) {
      throw InputError("fuse_consecutive: layer " + std::to_string(i) + " has stride " +
                       std::to_string(l.stride));
    }
    if (out >= 0 && l.in != out) {
      throw InputError("fuse_consecutive: layer " + std::to_string(i) +
                       " is not channel-chained to the previous conv");
    }
    if (in < 0) in = l.in;
    out = l.out;
    kernel += l.kernel - 1;
    pad += l.pad;
  }
  if (in < 0) throw InputError("fuse_consecutive: group holds no conv2d layer");
  ModelSpec r = spec;
  r.layers.erase(r.layers.begin() + first, r.layers.begin() + last + 1);
  r.layers.insert(r.layers.begin() + first,
                  LayerSpec::decomposed(in, out, out, kernel, Nonlinearity::relu, 1, pad));
  return r;
}

int receptive_field(const ModelSpec& spec, int index) {
  if (index < 0 || index >= static_cast<int>(spec.layers.size())) {
    throw InputError("receptive_field: layer index " + std::to_string(index) +
                     " out of range");
  }
  const std::vector<Shape> shapes = layer_shapes(spec);
  long long r = 1, jump = 1;
  for (int i = 0; i <= index; ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::conv2d:
      case LayerKind::maxpool:
        r += static_cast<long long>(l.kernel - 1) * jump;
        jump *= l.stride;
        break;
      case LayerKind::decomposed:
        // Vertical d x 1 stage then horizontal 1 x d stage; along H only the
        // vertical one has extent, so each axis sees one d-tap stride-s pass.
        r += static_cast<long long>(l.kernel - 1) * jump;
        jump *= l.stride;
        break;
      case LayerKind::linear:
      case LayerKind::avgpool_global: {
        const int h = i == 0 ? spec.input.h : shapes[i - 1].h;
        r += static_cast<long long>(h - 1) * jump;
        break;
      }
      default: break;
    }
  }
  return static_cast<int>(r);
}

long long conv_param_count(const ModelSpec& spec) {
  long long total = 0;
  for (const LayerSpec& l : spec.layers) {
    if (l.is_conv_like()) total += param_count(l, {});
  }
  return total;
}

long long total_param_count(const ModelSpec& spec) {
  const std::vector<Shape> shapes = layer_shapes(spec);
  const std::vector<LayerSpec> all = expanded_layers(spec);
  long long total = 0;
  Shape cur = spec.input;
  for (std::size_t i = 0; i < all.size(); ++i) {
    total += param_count(all[i], cur);
    cur = shapes[i];
  }
  return total;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelSpec spec) : spec_(std::move(spec)) {
  validate(spec_);
  specs_ = expanded_layers(spec_);
  const std::vector<Shape> shapes = layer_shapes(spec_);
  Shape cur = spec_.input;
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    layers_.push_back(make_layer(specs_[i], cur));
    cur = shapes[i];
  }
}

Model Model::instantiate(const ModelSpec& spec, InitScheme scheme, std::uint64_t seed) {
  Model m(spec);
  m.initialize(scheme, seed);
  return m;
}

void Model::initialize(InitScheme scheme, std::uint64_t seed) {
  seed_ = seed;
  std::mt19937_64 rng(seed);
  for (NamedLayerParams& lp : parameters()) {
    for (ParamRef& p : lp.tensors) {
      if (!p.trainable) continue;
      Tensor& t = *p.value;
      if (!p.decay) {
        // Biases start at 0; batch-norm scales at 1.
        const bool scale = p.name == "gamma" || p.name == "norm_gamma";
        t.fill(scale ? 1.0f : 0.0f);
        continue;
      }
      const Shape s = t.shape();
      const double fan_in = static_cast<double>(s.c) * s.h * s.w;
      const double fan_out = static_cast<double>(s.n) * s.h * s.w;
      if (scheme == InitScheme::xavier) {
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-a, a);
        for (float& v : t.data()) v = static_cast<float>(dist(rng));
      } else {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        for (float& v : t.data()) v = static_cast<float>(dist(rng));
      }
    }
  }
}

void Model::set_exec(const Exec& exec) {
  exec_ = exec;
  for (auto& l : layers_) l->set_exec(exec);
}

Tensor Model::forward(const Tensor& x, Mode mode) {
  const Shape& s = x.shape();
  if (s.c != spec_.input.c || s.h != spec_.input.h || s.w != spec_.input.w) {
    throw DimensionError("model '" + spec_.name + "' expects samples of " +
                         std::to_string(spec_.input.c) + "x" + std::to_string(spec_.input.h) +
                         "x" + std::to_string(spec_.input.w) + ", got " + to_string(s));
  }
  Tensor cur = layers_.front()->forward(x, mode);
  for (std::size_t i = 1; i < layers_.size(); ++i) cur = layers_[i]->forward(cur, mode);
  return cur;
}

Tensor Model::backward(const Tensor& grad_logits, bool input_grad) {
  if (!layers_.empty()) layers_.front()->set_input_grad(input_grad);
  Tensor g = grad_logits;
  for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g);
  return g;
}

std::vector<NamedLayerParams> Model::parameters() {
  std::vector<NamedLayerParams> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    std::vector<ParamRef> t = layers_[i]->tensors();
    if (t.empty()) continue;
    out.push_back({to_string(specs_[i].kind) + "_" + std::to_string(i), std::move(t)});
  }
  return out;
}

}  // namespace decomposeme
