#pragma once

// Declarative model specs, the built-in zoo, runtime models, and the two
// structural transforms (per-layer decomposition, consecutive-layer fusion).

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "decomposeme/layers.hpp"

namespace decomposeme {

enum class HeadStyle { full, compact, compact_avg };
enum class InitScheme { xavier, kaiming };

std::string to_string(HeadStyle h);
HeadStyle parse_head(const std::string& s);
std::string to_string(InitScheme s);
InitScheme parse_init(const std::string& s);

struct ModelSpec {
  std::string name = "model";
  Shape input{1, 1, 1, 1};  // n is always 1
  std::vector<LayerSpec> layers;
  HeadStyle head = HeadStyle::full;
  // Hidden widths of the full head, each followed by relu.
  std::vector<int> head_hidden{4096, 4096};
  int num_classes = 10;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Body layers followed by the head layers.
std::vector<LayerSpec> expanded_layers(const ModelSpec& spec);

/// Per-sample output shape of every expanded layer. Throws ValidationError.
std::vector<Shape> layer_shapes(const ModelSpec& spec);

/// Throws ValidationError on an empty body, bad head settings or a broken
/// channel chain.
void validate(const ModelSpec& spec);

/// JSON document -> spec. Schema violations throw ParseError whose message
/// starts with the JSON pointer of the offending value.
ModelSpec parse_model_spec(std::string_view text);
std::string serialize_model_spec(const ModelSpec& spec);

const std::vector<std::string>& builtin_model_names();
std::optional<ModelSpec> builtin_model(const std::string& name);
/// Built-in name, or a path to a JSON document.
ModelSpec resolve_model(const std::string& name_or_path);

struct LPolicy {
  enum class Kind { match_output, explicit_map } kind = Kind::match_output;
  std::map<int, int> widths;  // layer index -> L, for explicit_map

  static LPolicy match_output() { return {}; }
  static LPolicy explicit_widths(std::map<int, int> w) {
    return {Kind::explicit_map, std::move(w)};
  }
};

/// Replaces each selected conv2d(C,F,d) with decomposed(C,L,F,d) using relu.
/// Indices address spec.layers. Throws InputError for bad targets.
ModelSpec decompose_model(const ModelSpec& spec, const std::set<int>& indices,
                          const LPolicy& policy = LPolicy::match_output());

/// Replaces spec.layers[first..last] (stride-1 conv2d layers, optionally with
/// activations between them) by one decomposed layer with
/// d = 1 + sum(k - 1), pad = sum(pad) and L = output channels of the group.
ModelSpec fuse_consecutive(const ModelSpec& spec, int first, int last);

/// Input extent seen by one output unit of spec.layers[index] (H axis).
int receptive_field(const ModelSpec& spec, int index);

/// Conv stack parameter count: conv2d + decomposed layers only.
long long conv_param_count(const ModelSpec& spec);
long long total_param_count(const ModelSpec& spec);

/// Parameters of one parametrised layer, named "<kind>_<index>".
struct NamedLayerParams {
  std::string name;
  std::vector<ParamRef> tensors;
};

class Model {
 public:
  /// Zero parameters (batchnorm starts at identity).
  explicit Model(ModelSpec spec);
  static Model instantiate(const ModelSpec& spec, InitScheme scheme,
                           std::uint64_t seed);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  const std::vector<LayerSpec>& layer_specs() const { return specs_; }
  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }
  std::uint64_t seed() const { return seed_; }

  void initialize(InitScheme scheme, std::uint64_t seed);
  void set_exec(const Exec& exec);
  const Exec& exec() const { return exec_; }

  Tensor forward(const Tensor& x, Mode mode);
  /// Backward through every layer after a train-mode forward. Without
  /// `input_grad` the first layer may skip its input gradient and the
  /// result can be empty.
  Tensor backward(const Tensor& grad_logits, bool input_grad = true);

  std::vector<NamedLayerParams> parameters();

 private:
  ModelSpec spec_;
  std::vector<LayerSpec> specs_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::uint64_t seed_ = 0;
  Exec exec_;
};

}  // namespace decomposeme
