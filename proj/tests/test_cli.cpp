#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "decomposeme/cli.hpp"
#include "decomposeme/complexity.hpp"
#include "decomposeme/data.hpp"

using namespace decomposeme;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "decomposeme");
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("decomposeme_cli_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::vector<std::vector<double>> read_logits(const std::string& path) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<double> r;
    std::istringstream cells(line);
    std::string c;
    while (std::getline(cells, c, ',')) r.push_back(std::stod(c));
    rows.push_back(r);
  }
  return rows;
}

const char* kTinySpec = R"({"name":"tiny","input_shape":[1,8,8],"num_classes":2,"head":"compact",
  "layers":[{"kind":"conv2d","in":1,"out":4,"k":3},{"kind":"relu"},{"kind":"maxpool","k":2}]})";

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("git-style content hash") {
  CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
}

TEST_CASE("usage and exit codes") {
  CHECK(cli({"--help"}).code == 0);
  const Run none = cli({});
  CHECK(none.code == 1);
  CHECK(none.err.find("Usage") != std::string::npos);
  CHECK(cli({"bogus"}).code == 1);
  CHECK(cli({"analyze", "--model", "lenet", "--frobnicate"}).code == 1);
  CHECK(cli({"analyze", "--model", "no-such-model"}).code != 0);
  CHECK(cli({"analyze", "--model", "lenet", "--input", "3x28x28"}).code == 1);
  CHECK(cli({"train", "--model", "lenet", "--dataset", "synth:blobs:16", "--epochs", "-1"}).code ==
        1);
  CHECK(cli({"eval", "--model", "lenet", "--weights", "/nonexistent/w.dmw1", "--dataset",
             "random:4"})
            .code == 2);
  CHECK(cli({"train", "--model", "lenet", "--dataset", "mnist", "--data", "/nonexistent", "--out",
             (fs::temp_directory_path() / "decomposeme_cli_nodata").string()})
            .code == 2);
  fs::remove_all(fs::temp_directory_path() / "decomposeme_cli_nodata");
}

TEST_CASE("analyze emits the cost report") {
  const Run r = cli({"analyze", "--model", "lenet", "--input", "1x28x28"});
  CHECK(r.code == 0);
  CHECK(r.out == to_csv(count_macs(*builtin_model("lenet"))));

  TempDir dir("analyze");
  const Run c = cli({"analyze", "--model", "vgg-b", "--compare", "vgg-b-dec8-compact-avg", "--out",
                     dir.path.string()});
  CHECK(c.code == 0);
  CHECK(c.out.empty());
  CHECK(fs::exists(dir / "compare.csv"));
  CHECK(cli({"analyze", "--model", "lenet", "--out", dir.path.string()}).code == 0);
  CHECK(read_file(dir / "cost.csv") == r.out);
  CHECK(read_file(dir / "compare.csv").rfind("metric,vgg-b,vgg-b-dec8-compact-avg,ratio", 0) == 0);
}

TEST_CASE("train writes a manifest, metrics and weights, and replays exactly") {
  TempDir dir("train");
  write_file(dir / "tiny.json", kTinySpec);
  const Run r = cli({"train", "--model", dir / "tiny.json", "--dataset", "synth:separable_bars:64",
                     "--epochs", "3", "--batch", "8", "--seed", "5", "--out", dir / "run1"});
  REQUIRE(r.code == 0);
  for (const char* f : {"manifest.json", "spec.json", "metrics.csv", "weights.dmw1"})
    CHECK(fs::exists(fs::path(dir / "run1") / f));
  const std::string csv = read_file(dir / "run1/metrics.csv");
  CHECK(r.out == csv);
  CHECK(csv.rfind("epoch,lr,train_loss,train_top1,val_top1,gap\n", 0) == 0);

  const auto m = nlohmann::json::parse(read_file(dir / "run1/manifest.json"));
  for (const char* k : {"command", "config", "seeds", "spec_sha1", "spec_canonical", "outputs"})
    CHECK(m.contains(k));
  CHECK(m["spec_sha1"] == git_blob_sha1(read_file(dir / "run1/spec.json")));

  const Run again = cli({"train", "--replay", dir / "run1/manifest.json", "--out", dir / "run2"});
  REQUIRE(again.code == 0);
  CHECK(read_file(dir / "run2/metrics.csv") == csv);
  CHECK(read_file(dir / "run2/weights.dmw1") == read_file(dir / "run1/weights.dmw1"));

  // A manifest whose pinned spec no longer matches its hash is refused.
  auto tampered = m;
  tampered["spec_sha1"] = std::string(40, '0');
  write_file(dir / "bad.json", tampered.dump());
  CHECK(cli({"train", "--replay", dir / "bad.json", "--out", dir / "run3"}).code != 0);

  const Run ev = cli({"eval", "--model", dir / "run1/spec.json", "--weights",
                      dir / "run1/weights.dmw1", "--dataset", "synth:separable_bars:64",
                      "--seed", "5"});
  CHECK(ev.code == 0);
  CHECK(ev.out.rfind("samples,16\ntop1,", 0) == 0);
}

TEST_CASE("divergence exits with 2") {
  TempDir dir("diverge");
  write_file(dir / "tiny.json", kTinySpec);
  const Run r = cli({"train", "--model", dir / "tiny.json", "--dataset", "synth:blobs:32",
                     "--epochs", "2", "--lr", "1e30", "--out", dir / "run"});
  CHECK(r.code == 2);
  CHECK(r.err.find("epoch") != std::string::npos);
}

TEST_CASE("decompose then eval keeps the logits with identity nonlinearity") {
  TempDir dir("decompose");
  REQUIRE(cli({"train", "--model", "lenet", "--dataset", "random:64", "--epochs", "1", "--out",
               dir / "base"})
              .code == 0);
  const Run d = cli({"decompose", "--weights", dir / "base/weights.dmw1", "--spec", "lenet",
                     "--rank", "full", "--nl", "identity", "--out", dir / "wd.dmw1"});
  REQUIRE(d.code == 0);
  CHECK(d.out.rfind("layer,filters,L,reconstruction_error\n", 0) == 0);
  REQUIRE(fs::exists(dir / "wd.json"));

  REQUIRE(cli({"eval", "--model", "lenet", "--weights", dir / "base/weights.dmw1", "--dataset",
               "random:32", "--logits", dir / "a.csv"})
              .code == 0);
  REQUIRE(cli({"eval", "--model", dir / "wd.json", "--weights", dir / "wd.dmw1", "--dataset",
               "random:32", "--logits", dir / "b.csv"})
              .code == 0);
  const auto a = read_logits(dir / "a.csv"), b = read_logits(dir / "b.csv");
  REQUIRE(a.size() == b.size());
  REQUIRE(!a.empty());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].size(); ++k) worst = std::max(worst, std::abs(a[i][k] - b[i][k]));
  CHECK(worst < 1e-4);
}

TEST_CASE("decompose in spec mode") {
  const Run r = cli({"decompose", "--model", "lenet", "--layers", "0,3", "--L", "match"});
  REQUIRE(r.code == 0);
  const ModelSpec s = parse_model_spec(r.out);
  CHECK(s.name == "lenet-dec");
  CHECK(s.layers[0].kind == LayerKind::decomposed);
  CHECK(s.layers[3].kind == LayerKind::decomposed);
  CHECK(cli({"decompose", "--model", "lenet", "--layers", "1"}).code == 1);
}

TEST_CASE("fuse reports the receptive field on both sides") {
  TempDir dir("fuse");
  write_file(dir / "four.json", R"({"name":"four","input_shape":[3,16,16],"head":"compact",
    "layers":[{"kind":"conv2d","in":3,"out":8,"k":3,"pad":1},{"kind":"relu"},
              {"kind":"conv2d","in":8,"out":8,"k":3,"pad":1},{"kind":"relu"},
              {"kind":"conv2d","in":8,"out":8,"k":3,"pad":1},{"kind":"relu"},
              {"kind":"conv2d","in":8,"out":8,"k":3,"pad":1}]})");
  const Run r = cli({"fuse", "--model", dir / "four.json", "--group", "0-6"});
  REQUIRE(r.code == 0);
  CHECK(r.err.find("receptive_field,before,9,after,9") != std::string::npos);
  const ModelSpec s = parse_model_spec(r.out);
  CHECK(s.layers.size() == 1);
  CHECK(s.layers[0].kernel == 9);
  CHECK(cli({"fuse", "--model", dir / "four.json", "--group", "0-x"}).code == 1);
}

TEST_CASE("synth writes a CSV under --out only") {
  TempDir dir("synth");
  const Run r = cli({"synth", "--dataset", "synth:blobs:10", "--seed", "2", "--out",
                     dir.path.string()});
  CHECK(r.code == 0);
  CHECK(fs::exists(dir / "blobs.csv"));
  int files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path)) ++files;
  CHECK(files == 1);
  CHECK(cli({"synth", "--dataset", "mnist"}).code == 1);
}

}  // TEST_SUITE
