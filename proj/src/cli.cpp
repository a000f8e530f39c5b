#include "decomposeme/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "decomposeme/complexity.hpp"
#include "decomposeme/data.hpp"
#include "decomposeme/decompose.hpp"
#include "decomposeme/error.hpp"
#include "decomposeme/model.hpp"
#include "decomposeme/training.hpp"

#ifndef DECOMPOSEME_DEFAULT_DATA
#define DECOMPOSEME_DEFAULT_DATA "data"
#endif

namespace decomposeme {

namespace fs = std::filesystem;
using nlohmann::json;

std::string git_blob_sha1(std::string_view content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw IoError("sha1: cannot allocate digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, md, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw IoError("sha1: digest failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

namespace {

struct Datasets {
  LabeledDataset train;
  LabeledDataset val;
};

std::string data_root() {
  if (const char* env = std::getenv("DECOMPOSEME_DATA"); env != nullptr && *env != '\0') {
    return env;
  }
  return DECOMPOSEME_DEFAULT_DATA;
}

fs::path resolve_data_dir(const std::string& given, const std::string& dataset) {
  if (!given.empty()) return given;
  const fs::path root = data_root();
  const fs::path sub = root / dataset;
  return fs::is_directory(sub) ? sub : root;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) parts.push_back(cur);
  return parts;
}

int parse_positive(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const long v = std::stol(s, &used);
    if (used == s.size() && v >= 1 && v <= 100'000'000) return static_cast<int>(v);
  } catch (const std::exception&) {
  }
  throw ConfigError(what + ": expected a positive integer, got '" + s + "'");
}

Datasets load_datasets(const std::string& dataset, const std::string& data_dir,
                       std::uint64_t seed, const ModelSpec& spec) {
  if (dataset == "mnist") {
    auto [train, val] = load_mnist(resolve_data_dir(data_dir, "mnist"));
    return {std::move(train), std::move(val)};
  }
  if (dataset == "cifar10") {
    auto [train, val] = load_cifar10_bin(resolve_data_dir(data_dir, "cifar10"));
    return {std::move(train), std::move(val)};
  }
  const std::vector<std::string> parts = split(dataset, ':');
  if (parts.size() == 3 && parts[0] == "synth") {
    const SynthKind kind = parse_synth_kind(parts[1]);
    const int n = parse_positive(parts[2], "--dataset synth size");
    return {synth_dataset(kind, n, seed),
            synth_dataset(kind, std::max(2, n / 4), seed + 0x9E3779B97F4A7C15ULL)};
  }
  if (parts.size() == 2 && parts[0] == "random") {
    const int n = parse_positive(parts[1], "--dataset random size");
    LabeledDataset ds;
    ds.images = Tensor({n, spec.input.c, spec.input.h, spec.input.w});
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> dist(0.0f, 1.0f);
    for (float& v : ds.images.data()) v = dist(rng);
    ds.labels.assign(n, 0);
    ds.num_classes = spec.num_classes;
    ds.stats = NormStats::identity(spec.input.c);
    return {ds, ds};
  }
  throw ConfigError("--dataset: expected mnist, cifar10, synth:<kind>:<n> or random:<n>, got '" +
                    dataset + "'");
}

void check_classes(const ModelSpec& spec, const LabeledDataset& ds) {
  if (ds.num_classes > spec.num_classes) {
    throw ValidationError("dataset has " + std::to_string(ds.num_classes) +
                          " classes, model '" + spec.name + "' has " +
                          std::to_string(spec.num_classes) + " outputs");
  }
}

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("--precision: expected f32 or f64, got '" + s + "'");
}

std::string precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Shape parse_input(const std::string& s) {
  const std::vector<std::string> parts = split(s, 'x');
  if (parts.size() != 3) throw ConfigError("--input: expected CxHxW, got '" + s + "'");
  return {1, parse_positive(parts[0], "--input"), parse_positive(parts[1], "--input"),
          parse_positive(parts[2], "--input")};
}

std::set<int> parse_layers(const std::string& s) {
  std::set<int> out;
  for (const std::string& p : split(s, ',')) {
    if (p.empty()) continue;
    try {
      std::size_t used = 0;
      const int v = std::stoi(p, &used);
      if (used != p.size()) throw std::invalid_argument(p);
      out.insert(v);
    } catch (const std::exception&) {
      throw ConfigError("--layers: bad index '" + p + "'");
    }
  }
  return out;
}

std::set<int> conv_layers(const ModelSpec& spec) {
  std::set<int> out;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (spec.layers[i].kind == LayerKind::conv2d) out.insert(static_cast<int>(i));
  }
  return out;
}

ModelSpec load_spec(const std::string& model, const std::string& head) {
  ModelSpec spec = resolve_model(model);
  if (!head.empty()) {
    spec.head = parse_head(head);
    validate(spec);
  }
  return spec;
}

void emit(std::ostream& out, const std::string& text, const std::string& path) {
  if (path.empty()) {
    out << text;
  } else {
    write_file(path, text);
  }
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::string model;
  std::string dataset = "mnist";
  std::string data;
  std::string init = "kaiming";
  std::string head;
  std::string precision = "f32";
  std::string out;
  std::string replay;
  std::uint64_t seed = 1;
  TrainConfig cfg;
  double flip = -1.0;  // < 0: dataset default
  bool time = false;
};

json manifest_config(const TrainOptions& o, const TrainConfig& cfg) {
  return {{"model", o.model},
          {"dataset", o.dataset},
          {"data", o.data},
          {"init", o.init},
          {"head", o.head},
          {"epochs", cfg.epochs},
          {"batch", cfg.batch_size},
          {"lr", cfg.lr0},
          {"momentum", cfg.momentum},
          {"wd", cfg.weight_decay},
          {"seed", o.seed},
          {"threads", cfg.threads},
          {"precision", precision_name(cfg.precision)},
          {"flip", cfg.augment.flip_prob},
          {"crop_pad", cfg.augment.crop_pad},
          {"plateau_window", cfg.plateau.window},
          {"plateau_min_delta", cfg.plateau.min_delta},
          {"plateau_factor", cfg.plateau.factor}};
}

TrainOptions options_from_manifest(const json& m) {
  const json& c = m.at("config");
  TrainOptions o;
  o.model = c.at("model").get<std::string>();
  o.dataset = c.at("dataset").get<std::string>();
  o.data = c.at("data").get<std::string>();
  o.init = c.at("init").get<std::string>();
  o.head = c.at("head").get<std::string>();
  o.seed = c.at("seed").get<std::uint64_t>();
  o.precision = c.at("precision").get<std::string>();
  o.cfg.epochs = c.at("epochs").get<int>();
  o.cfg.batch_size = c.at("batch").get<int>();
  o.cfg.lr0 = c.at("lr").get<double>();
  o.cfg.momentum = c.at("momentum").get<double>();
  o.cfg.weight_decay = c.at("wd").get<double>();
  o.cfg.threads = c.at("threads").get<int>();
  o.flip = c.at("flip").get<double>();
  o.cfg.augment.crop_pad = c.at("crop_pad").get<int>();
  o.cfg.plateau.window = c.at("plateau_window").get<int>();
  o.cfg.plateau.min_delta = c.at("plateau_min_delta").get<double>();
  o.cfg.plateau.factor = c.at("plateau_factor").get<double>();
  return o;
}

int run_train(TrainOptions o, const std::vector<std::string>& args, std::ostream& out,
              std::ostream& err) {
  std::optional<ModelSpec> pinned;
  if (!o.replay.empty()) {
    json m;
    try {
      m = json::parse(read_file(o.replay));
      const std::string out_dir = o.out;
      const std::string data_override = o.data;
      const bool timing = o.time;
      o = options_from_manifest(m);
      o.out = out_dir;
      o.time = timing;
      if (!data_override.empty()) o.data = data_override;
      const std::string spec_text = m.at("spec_canonical").get<std::string>();
      if (git_blob_sha1(spec_text) != m.at("spec_sha1").get<std::string>()) {
        throw FormatError("manifest '" + o.replay + "': spec hash does not match its content");
      }
      pinned = parse_model_spec(spec_text);
    } catch (const json::exception& e) {
      throw FormatError("manifest '" + o.replay + "': " + e.what());
    }
  }
  if (o.out.empty()) throw ConfigError("train: --out is required");
  if (o.model.empty() && !pinned) throw ConfigError("train: --model is required");

  ModelSpec spec = pinned ? *pinned : load_spec(o.model, o.head);
  TrainConfig cfg = o.cfg;
  cfg.seed = o.seed;
  cfg.precision = parse_precision(o.precision);
  // Digits are not mirror-symmetric, so MNIST trains without flips.
  cfg.augment.flip_prob = o.flip >= 0.0 ? o.flip : (o.dataset == "mnist" ? 0.0 : 0.5);
  validate(cfg);
  const InitScheme init = parse_init(o.init);

  Datasets data = load_datasets(o.dataset, o.data, o.seed, spec);
  check_classes(spec, data.train);

  fs::create_directories(o.out);
  const std::string canonical = serialize_model_spec(spec);
  const fs::path dir = o.out;
  TrainOptions recorded = o;
  recorded.flip = cfg.augment.flip_prob;
  json manifest = {{"command", args},
                   {"config", manifest_config(recorded, cfg)},
                   {"seeds", {{"model", o.seed}, {"train", o.seed}}},
                   {"spec_sha1", git_blob_sha1(canonical)},
                   {"spec_canonical", canonical},
                   {"outputs",
                    {{"metrics", (dir / "metrics.csv").string()},
                     {"weights", (dir / "weights.dmw1").string()},
                     {"spec", (dir / "spec.json").string()}}}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  write_file(dir / "spec.json", canonical);

  Model model = Model::instantiate(spec, init, o.seed);
  const auto t0 = std::chrono::steady_clock::now();
  auto last = t0;
  err << "epoch,lr,train_loss,train_top1,val_top1,gap" << (o.time ? ",seconds" : "") << "\n";
  const MetricsLog log = train(model, data.train, data.val, cfg, [&](const EpochMetrics& r) {
    MetricsLog one;
    one.rows.push_back(r);
    std::string line = one.to_csv().substr(one.to_csv().find('\n') + 1);
    line.pop_back();
    err << line;
    if (o.time) {
      const auto now = std::chrono::steady_clock::now();
      err << "," << std::chrono::duration<double>(now - last).count();
      last = now;
    }
    err << std::endl;
  });
  write_file(dir / "metrics.csv", log.to_csv());
  write_file(dir / "weights.dmw1", save_weights(model));
  out << log.to_csv();
  if (o.time) {
    err << "wall time (non-normative): "
        << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
        << " s\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string model;
  std::string weights;
  std::string dataset = "mnist";
  std::string data;
  std::string head;
  std::string init = "kaiming";
  std::string logits;
  std::string split = "val";
  std::uint64_t seed = 1;
  int threads = 1;
};

int run_eval(const EvalOptions& o, std::ostream& out) {
  const ModelSpec spec = load_spec(o.model, o.head);
  Model model = o.weights.empty() ? Model::instantiate(spec, parse_init(o.init), o.seed)
                                  : load_weights(read_file(o.weights), spec);
  model.set_exec({o.threads, Precision::f64});
  Datasets data = load_datasets(o.dataset, o.data, o.seed, spec);
  if (o.split != "val" && o.split != "train") {
    throw ConfigError("--split: expected val or train, got '" + o.split + "'");
  }
  const LabeledDataset& ds = o.split == "val" ? data.val : data.train;
  check_classes(spec, ds);
  const Tensor logits = predict_logits(model, ds);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (argmax(logits.sample(static_cast<int>(i))) == ds.labels[i]) ++correct;
  }
  if (!o.logits.empty()) {
    std::string csv;
    char buf[32];
    for (int i = 0; i < logits.shape().n; ++i) {
      const auto row = logits.sample(i);
      for (std::size_t k = 0; k < row.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.9g", row[k]);
        csv += (k ? "," : "") + std::string(buf);
      }
      csv += '\n';
    }
    write_file(o.logits, csv);
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(correct) / ds.size());
  out << "samples," << ds.size() << "\ntop1," << buf << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeOptions {
  std::string model;
  std::string compare;
  std::string input;
  std::string head;
  std::string out;
  int threads = 1;
  bool time = false;
};

void time_model(const ModelSpec& spec, int threads, std::ostream& err) {
  Model m = Model::instantiate(spec, InitScheme::kaiming, 1);
  m.set_exec({threads, Precision::f32});
  constexpr int kBatch = 8;
  Tensor x({kBatch, spec.input.c, spec.input.h, spec.input.w}, 0.5f);
  std::vector<int> labels(kBatch, 0);
  const auto t0 = std::chrono::steady_clock::now();
  const Tensor logits = m.forward(x, Mode::train);
  const auto t1 = std::chrono::steady_clock::now();
  m.backward(softmax_cross_entropy(logits, labels).grad_logits);
  const auto t2 = std::chrono::steady_clock::now();
  err << "timing (non-normative, batch " << kBatch << ", " << threads << " thread(s)): "
      << spec.name << " forward "
      << std::chrono::duration<double, std::milli>(t1 - t0).count() << " ms, backward "
      << std::chrono::duration<double, std::milli>(t2 - t1).count() << " ms\n";
}

int run_analyze(const AnalyzeOptions& o, std::ostream& out, std::ostream& err) {
  ModelSpec a = load_spec(o.model, o.head);
  if (!o.input.empty()) {
    a.input = parse_input(o.input);
    validate(a);
  }
  std::string csv;
  if (o.compare.empty()) {
    csv = to_csv(count_macs(a));
  } else {
    ModelSpec b = load_spec(o.compare, o.head);
    if (!o.input.empty()) b.input = a.input;
    validate(b);
    csv = to_csv(compare_specs(a, b));
    if (o.time) time_model(b, o.threads, err);
  }
  if (o.time) time_model(a, o.threads, err);
  if (o.out.empty()) {
    out << csv;
  } else {
    fs::create_directories(o.out);
    write_file(fs::path(o.out) / (o.compare.empty() ? "cost.csv" : "compare.csv"), csv);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// decompose

struct DecomposeOptions {
  std::string model;
  std::string weights;
  std::string layers;
  std::string rank;
  std::string width = "match";
  std::string nl = "identity";
  std::string head;
  std::string out;
};

int decompose_spec(const DecomposeOptions& o, std::ostream& out) {
  const ModelSpec spec = load_spec(o.model, o.head);
  const std::set<int> idx = o.layers.empty() ? conv_layers(spec) : parse_layers(o.layers);
  LPolicy policy = LPolicy::match_output();
  if (o.width != "match") {
    const int l = parse_positive(o.width, "--L");
    std::map<int, int> widths;
    for (int i : idx) widths[i] = l;
    policy = LPolicy::explicit_widths(widths);
  }
  ModelSpec d = decompose_model(spec, idx, policy);
  d.name = spec.name + "-dec";
  validate(d);
  emit(out, serialize_model_spec(d), o.out);
  return 0;
}

int decompose_weights(const DecomposeOptions& o, std::ostream& out) {
  if (o.out.empty()) throw ConfigError("decompose: --out is required with --weights");
  const ModelSpec spec = load_spec(o.model, o.head);
  Model src = load_weights(read_file(o.weights), spec);
  const std::set<int> idx = o.layers.empty() ? conv_layers(spec) : parse_layers(o.layers);
  const Nonlinearity nl = parse_nonlinearity(o.nl);
  const bool by_budget = o.width != "match";
  if (by_budget && !o.rank.empty()) {
    throw ConfigError("decompose: give either --rank or --L, not both");
  }

  ModelSpec dspec = spec;
  dspec.name = spec.name + "-dec";
  std::map<int, DecomposedLayer> built;
  std::ostringstream report;
  report << "layer,filters,L,reconstruction_error\n";
  for (int i : idx) {
    if (i < 0 || i >= static_cast<int>(spec.layers.size()) ||
        spec.layers[i].kind != LayerKind::conv2d) {
      throw InputError("decompose: layer " + std::to_string(i) + " is not a conv2d layer");
    }
    auto& conv = dynamic_cast<Conv2dLayer&>(src.layer(i));
    const KernelBank2D& bank = conv.bank();
    DecomposedLayer layer;
    if (by_budget) {
      layer = build_decomposed_pair(bank, parse_positive(o.width, "--L"), nl);
    } else {
      std::vector<int> ranks = full_ranks(bank);
      if (!o.rank.empty() && o.rank != "full") {
        const int r = parse_positive(o.rank, "--rank");
        for (int& k : ranks) k = std::min(k, r);
      }
      layer = build_decomposed_pair(bank, ranks, nl);
    }
    const LayerSpec& l = spec.layers[i];
    dspec.layers[i] = LayerSpec::decomposed(l.in, layer.width(), l.out, l.kernel, nl,
                                            l.stride, l.pad);
    DecomposedLayer linear_copy = layer;
    linear_copy.nonlinearity = Nonlinearity::identity;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", reconstruction_error(bank, linear_copy));
    report << i << ',' << bank.filters() << ',' << layer.width() << ',' << buf << '\n';
    built.emplace(i, std::move(layer));
  }
  validate(dspec);

  Model dst(dspec);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (const auto it = built.find(static_cast<int>(i)); it != built.end()) {
      auto& mod = dynamic_cast<DecomposedModule&>(dst.layer(i));
      mod.layer() = it->second;
      continue;
    }
    const std::vector<ParamRef> from = src.layer(i).tensors();
    const std::vector<ParamRef> to = dst.layer(i).tensors();
    for (std::size_t k = 0; k < from.size(); ++k) *to[k].value = *from[k].value;
  }
  write_file(o.out, save_weights(dst));
  fs::path spec_path = o.out;
  spec_path.replace_extension(".json");
  write_file(spec_path, serialize_model_spec(dspec));
  out << report.str();
  return 0;
}

// ---------------------------------------------------------------------------
// fuse

int run_fuse(const std::string& model, const std::string& group, const std::string& head,
             const std::string& out_path, std::ostream& out, std::ostream& err) {
  const ModelSpec spec = load_spec(model, head);
  std::vector<std::string> parts = split(group, '-');
  if (parts.size() != 2) parts = split(group, ':');
  if (parts.size() != 2) throw ConfigError("--group: expected <first>-<last>, got '" + group + "'");
  int first = 0, last = 0;
  try {
    first = std::stoi(parts[0]);
    last = std::stoi(parts[1]);
  } catch (const std::exception&) {
    throw ConfigError("--group: expected <first>-<last>, got '" + group + "'");
  }
  ModelSpec fused = fuse_consecutive(spec, first, last);
  fused.name = spec.name + "-fused";
  validate(fused);
  err << "receptive_field,before," << receptive_field(spec, last) << ",after,"
      << receptive_field(fused, first) << "\n";
  emit(out, serialize_model_spec(fused), out_path);
  return 0;
}

// ---------------------------------------------------------------------------
// synth

int run_synth(const std::string& dataset, std::uint64_t seed, const std::string& out_dir,
              std::ostream& out) {
  const std::vector<std::string> parts = split(dataset, ':');
  if (parts.size() != 3 || parts[0] != "synth") {
    throw ConfigError("synth: --dataset must be synth:<kind>:<n>, got '" + dataset + "'");
  }
  const SynthKind kind = parse_synth_kind(parts[1]);
  const LabeledDataset ds = synth_dataset(kind, parse_positive(parts[2], "synth size"), seed);
  std::string csv = "label";
  const std::size_t per = ds.images.shape().sample_size();
  for (std::size_t p = 0; p < per; ++p) csv += ",p" + std::to_string(p);
  csv += '\n';
  char buf[32];
  for (std::size_t i = 0; i < ds.size(); ++i) {
    csv += std::to_string(ds.labels[i]);
    for (float v : ds.images.sample(static_cast<int>(i))) {
      std::snprintf(buf, sizeof buf, ",%.6f", v);
      csv += buf;
    }
    csv += '\n';
  }
  if (out_dir.empty()) {
    out << csv;
  } else {
    fs::create_directories(out_dir);
    write_file(fs::path(out_dir) / (to_string(kind) + ".csv"), csv);
    out << "samples," << ds.size() << "\nkind," << to_string(kind) << "\n";
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Decomposed convolution toolkit", "decomposeme"};
  app.require_subcommand(1);

  TrainOptions tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write metrics, weights and a manifest");
  train_cmd->add_option("--model", tr.model, "Built-in name or spec JSON path");
  train_cmd->add_option("--dataset", tr.dataset, "mnist | cifar10 | synth:<kind>:<n>");
  train_cmd->add_option("--data", tr.data, "Dataset directory (default $DECOMPOSEME_DATA)");
  train_cmd->add_option("--epochs", tr.cfg.epochs);
  train_cmd->add_option("--batch", tr.cfg.batch_size);
  train_cmd->add_option("--lr", tr.cfg.lr0);
  train_cmd->add_option("--momentum", tr.cfg.momentum);
  train_cmd->add_option("--wd", tr.cfg.weight_decay);
  train_cmd->add_option("--seed", tr.seed);
  train_cmd->add_option("--init", tr.init, "xavier | kaiming");
  train_cmd->add_option("--head", tr.head, "full | compact | compact_avg");
  train_cmd->add_option("--threads", tr.cfg.threads);
  train_cmd->add_option("--precision", tr.precision, "f32 | f64 GEMM accumulation");
  train_cmd->add_option("--flip", tr.flip, "Horizontal flip probability");
  train_cmd->add_option("--crop-pad", tr.cfg.augment.crop_pad);
  train_cmd->add_option("--plateau-window", tr.cfg.plateau.window);
  train_cmd->add_option("--plateau-delta", tr.cfg.plateau.min_delta);
  train_cmd->add_option("--plateau-factor", tr.cfg.plateau.factor);
  train_cmd->add_option("--replay", tr.replay, "Re-run the configuration of a manifest.json");
  train_cmd->add_option("--out", tr.out, "Output directory");
  train_cmd->add_flag("--time", tr.time, "Report wall time per epoch (non-normative)");

  EvalOptions ev;
  auto* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy of a model, optionally its logits");
  eval_cmd->add_option("--model", ev.model)->required();
  eval_cmd->add_option("--weights", ev.weights, "DMW1 file (default: fresh init)");
  eval_cmd->add_option("--dataset", ev.dataset, "mnist | cifar10 | synth:<kind>:<n> | random:<n>");
  eval_cmd->add_option("--data", ev.data);
  eval_cmd->add_option("--split", ev.split, "val | train");
  eval_cmd->add_option("--head", ev.head);
  eval_cmd->add_option("--init", ev.init);
  eval_cmd->add_option("--seed", ev.seed);
  eval_cmd->add_option("--threads", ev.threads);
  eval_cmd->add_option("--logits", ev.logits, "Write per-sample logits as CSV");

  AnalyzeOptions an;
  auto* analyze_cmd = app.add_subcommand("analyze", "Parameter and MAC report as CSV");
  analyze_cmd->add_option("--model", an.model)->required();
  analyze_cmd->add_option("--compare", an.compare, "Second model for a side-by-side table");
  analyze_cmd->add_option("--input", an.input, "CxHxW override");
  analyze_cmd->add_option("--head", an.head);
  analyze_cmd->add_option("--threads", an.threads);
  analyze_cmd->add_option("--out", an.out);
  analyze_cmd->add_flag("--time", an.time, "Measure forward/backward wall time (non-normative)");

  DecomposeOptions de;
  auto* decompose_cmd =
      app.add_subcommand("decompose", "Decompose a spec, or convert trained conv weights");
  decompose_cmd->add_option("--model", de.model)->required();
  decompose_cmd->add_option("--spec", de.model, "Alias of --model");
  decompose_cmd->add_option("--weights", de.weights, "DMW1 weights to convert");
  decompose_cmd->add_option("--layers", de.layers, "Comma-separated layer indices");
  decompose_cmd->add_option("--rank", de.rank, "Per-filter rank: <int> | full");
  decompose_cmd->add_option("--L", de.width, "match | <int>");
  decompose_cmd->add_option("--nl", de.nl, "identity | relu | tanh (weights mode)");
  decompose_cmd->add_option("--head", de.head);
  decompose_cmd->add_option("--out", de.out);

  std::string fuse_model, fuse_group, fuse_head, fuse_out;
  auto* fuse_cmd = app.add_subcommand("fuse", "Fuse consecutive conv layers into one decomposed layer");
  fuse_cmd->add_option("--model", fuse_model)->required();
  fuse_cmd->add_option("--group", fuse_group, "<first>-<last> layer indices")->required();
  fuse_cmd->add_option("--head", fuse_head);
  fuse_cmd->add_option("--out", fuse_out);

  std::string synth_dataset_arg = "synth:blobs:100", synth_out;
  std::uint64_t synth_seed = 1;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset as CSV");
  synth_cmd->add_option("--dataset", synth_dataset_arg, "synth:<kind>:<n>");
  synth_cmd->add_option("--seed", synth_seed);
  synth_cmd->add_option("--out", synth_out);

  // The spec flag set is shared; --model doubles as --spec for decompose.
  decompose_cmd->get_option("--model")->required(false);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*train_cmd) return run_train(tr, args, out, err);
    if (*eval_cmd) return run_eval(ev, out);
    if (*analyze_cmd) return run_analyze(an, out, err);
    if (*decompose_cmd) {
      if (de.model.empty()) throw ConfigError("decompose: --model is required");
      return de.weights.empty() ? decompose_spec(de, out) : decompose_weights(de, out);
    }
    if (*fuse_cmd) return run_fuse(fuse_model, fuse_group, fuse_head, fuse_out, out, err);
    if (*synth_cmd) return run_synth(synth_dataset_arg, synth_seed, synth_out, out);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return is_validation_error(e) ? 1 : 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  err << "error: no command given\n" << app.help();
  return 1;
}

}  // namespace decomposeme
