#include "decomposeme/data.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "decomposeme/error.hpp"

namespace decomposeme {

static_assert(std::endian::native == std::endian::little,
              "DMW1 and the CIFAR decoder assume a little-endian host");

NormStats NormStats::identity(int channels) {
  return {std::vector<float>(channels, 0.0f), std::vector<float>(channels, 1.0f)};
}

NormStats compute_stats(const Tensor& images) {
  const Shape s = images.shape();
  NormStats st;
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  for (int c = 0; c < s.c; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const float* p = images.raw() + images.offset(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        sum += p[i];
        sq += static_cast<double>(p[i]) * p[i];
      }
    }
    const double count = static_cast<double>(plane) * s.n;
    const double mean = count > 0 ? sum / count : 0.0;
    const double var = count > 0 ? std::max(0.0, sq / count - mean * mean) : 0.0;
    const double sd = std::sqrt(var);
    st.mean.push_back(static_cast<float>(mean));
    st.stddev.push_back(sd > 1e-12 ? static_cast<float>(sd) : 1.0f);
  }
  return st;
}

void standardize(LabeledDataset& ds, const NormStats& stats) {
  const Shape s = ds.images.shape();
  if (stats.mean.size() != static_cast<std::size_t>(s.c) ||
      stats.stddev.size() != static_cast<std::size_t>(s.c)) {
    throw DimensionError("standardize: statistics for " + std::to_string(stats.mean.size()) +
                         " channels, images have " + std::to_string(s.c));
  }
  const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      float* p = ds.images.raw() + ds.images.offset(n, c, 0, 0);
      const float m = stats.mean[c], inv = 1.0f / stats.stddev[c];
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - m) * inv;
    }
  }
  ds.stats = stats;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "': file not found or unreadable");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// IDX

namespace {

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(what_ + ": truncated at byte offset " + std::to_string(bytes_.size()) +
                        ", needed " + std::to_string(pos_ + n) + " bytes");
    }
  }
  std::uint32_t be_u32() {
    need(4);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += 4;
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) |
           (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]};
  }
  const unsigned char* take(std::size_t n) {
    need(n);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

}  // namespace

LabeledDataset decode_idx(std::string_view image_bytes, std::string_view label_bytes) {
  ByteReader img(image_bytes, "IDX images");
  const std::uint32_t magic = img.be_u32();
  if (magic != 0x00000803u) {
    throw FormatError("IDX images: bad magic, expected 0x00000803, found " + hex32(magic));
  }
  const std::uint32_t count = img.be_u32();
  const std::uint32_t rows = img.be_u32();
  const std::uint32_t cols = img.be_u32();
  if (rows == 0 || cols == 0 || rows > 4096 || cols > 4096) {
    throw FormatError("IDX images: implausible extent " + std::to_string(rows) + "x" +
                      std::to_string(cols));
  }
  const std::size_t plane = static_cast<std::size_t>(rows) * cols;
  const unsigned char* pixels = img.take(plane * count);

  ByteReader lab(label_bytes, "IDX labels");
  const std::uint32_t lmagic = lab.be_u32();
  if (lmagic != 0x00000801u) {
    throw FormatError("IDX labels: bad magic, expected 0x00000801, found " + hex32(lmagic));
  }
  const std::uint32_t lcount = lab.be_u32();
  if (lcount != count) {
    throw ValidationError("IDX: " + std::to_string(count) + " images but " +
                          std::to_string(lcount) + " labels");
  }
  const unsigned char* labels = lab.take(count);

  LabeledDataset ds;
  ds.images = Tensor({static_cast<int>(count), 1, static_cast<int>(rows), static_cast<int>(cols)});
  float* out = ds.images.raw();
  for (std::size_t i = 0; i < plane * count; ++i) out[i] = pixels[i] / 255.0f;
  ds.labels.resize(count);
  int max_label = -1;
  for (std::uint32_t i = 0; i < count; ++i) {
    ds.labels[i] = labels[i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = max_label + 1;
  ds.stats = NormStats::identity(1);
  return ds;
}

LabeledDataset load_idx(const std::filesystem::path& images,
                        const std::filesystem::path& labels) {
  return decode_idx(read_file(images), read_file(labels));
}

namespace {

std::filesystem::path find_idx(const std::filesystem::path& dir, const std::string& stem,
                               const std::string& suffix) {
  for (const char* sep : {"-", "."}) {
    const auto p = dir / (stem + sep + suffix);
    if (std::filesystem::exists(p)) return p;
  }
  throw IoError("MNIST file '" + (dir / (stem + "-" + suffix)).string() + "' not found");
}

}  // namespace

std::pair<LabeledDataset, LabeledDataset> load_mnist(const std::filesystem::path& dir) {
  LabeledDataset train = load_idx(find_idx(dir, "train-images", "idx3-ubyte"),
                                  find_idx(dir, "train-labels", "idx1-ubyte"));
  LabeledDataset test = load_idx(find_idx(dir, "t10k-images", "idx3-ubyte"),
                                 find_idx(dir, "t10k-labels", "idx1-ubyte"));
  const int classes = std::max(train.num_classes, test.num_classes);
  train.num_classes = test.num_classes = classes;
  const NormStats st = compute_stats(train.images);
  standardize(train, st);
  standardize(test, st);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// CIFAR-10

LabeledDataset decode_cifar10(std::string_view bytes, bool expect_full_batch,
                              const std::string& origin) {
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  constexpr std::size_t kBatch = 10000;
  if (expect_full_batch ? bytes.size() != kBatch * kRecord
                        : (bytes.empty() || bytes.size() % kRecord != 0)) {
    throw FormatError("CIFAR-10 batch '" + origin + "': " + std::to_string(bytes.size()) +
                      " bytes, expected " +
                      (expect_full_batch ? std::to_string(kBatch * kRecord)
                                         : "a positive multiple of " + std::to_string(kRecord)));
  }
  const int n = static_cast<int>(bytes.size() / kRecord);
  LabeledDataset ds;
  ds.images = Tensor({n, 3, 32, 32});
  ds.labels.resize(n);
  ds.num_classes = 10;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  float* out = ds.images.raw();
  for (int i = 0; i < n; ++i) {
    const unsigned char* rec = p + static_cast<std::size_t>(i) * kRecord;
    if (rec[0] > 9) {
      throw FormatError("CIFAR-10 batch '" + origin + "': label " + std::to_string(rec[0]) +
                        " at record " + std::to_string(i));
    }
    ds.labels[i] = rec[0];
    for (std::size_t j = 0; j < kRecord - 1; ++j) {
      out[static_cast<std::size_t>(i) * (kRecord - 1) + j] = rec[1 + j] / 255.0f;
    }
  }
  ds.stats = NormStats::identity(3);
  return ds;
}

namespace {

LabeledDataset concat(std::vector<LabeledDataset>& parts) {
  int n = 0;
  for (const auto& p : parts) n += p.images.shape().n;
  const Shape s = parts.front().images.shape();
  LabeledDataset out;
  out.images = Tensor({n, s.c, s.h, s.w});
  out.num_classes = parts.front().num_classes;
  out.stats = parts.front().stats;
  std::size_t at = 0;
  for (const auto& p : parts) {
    std::memcpy(out.images.raw() + at, p.images.raw(), p.images.size() * sizeof(float));
    at += p.images.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  return out;
}

}  // namespace

std::pair<LabeledDataset, LabeledDataset> load_cifar10_bin(const std::filesystem::path& dir) {
  std::vector<LabeledDataset> parts;
  for (int b = 1; b <= 5; ++b) {
    const auto p = dir / ("data_batch_" + std::to_string(b) + ".bin");
    parts.push_back(decode_cifar10(read_file(p), true, p.string()));
  }
  LabeledDataset train = concat(parts);
  const auto tp = dir / "test_batch.bin";
  LabeledDataset test = decode_cifar10(read_file(tp), true, tp.string());
  const NormStats st = compute_stats(train.images);
  standardize(train, st);
  standardize(test, st);
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Synthetic sets

SynthKind parse_synth_kind(const std::string& s) {
  if (s == "blobs") return SynthKind::blobs;
  if (s == "separable_bars" || s == "bars") return SynthKind::separable_bars;
  throw ParseError("unknown synthetic dataset '" + s + "' (blobs|separable_bars)");
}

std::string to_string(SynthKind k) {
  return k == SynthKind::blobs ? "blobs" : "separable_bars";
}

namespace {

constexpr int kPlane = kSynthSide * kSynthSide;

Tensor draw_mean(std::mt19937_64& rng) {
  Tensor mu({1, 1, kSynthSide, kSynthSide});
  std::bernoulli_distribution coin(0.5);
  for (float& v : mu.data()) v = coin(rng) ? 0.5f : -0.5f;
  return mu;
}

}  // namespace

Tensor blob_mean() {
  std::mt19937_64 rng(kBlobMeanSeed);
  return draw_mean(rng);
}

LabeledDataset synth_dataset(SynthKind kind, int n, std::uint64_t seed) {
  if (n < 2) throw InputError("synth_dataset: n must be >= 2, got " + std::to_string(n));
  std::mt19937_64 rng(seed);
  LabeledDataset ds;
  ds.images = Tensor({n, 1, kSynthSide, kSynthSide});
  ds.labels.resize(n);
  ds.num_classes = 2;
  ds.stats = NormStats::identity(1);
  if (kind == SynthKind::blobs) {
    const Tensor mu = blob_mean();
    double mu_norm = 0.0;
    for (float v : mu.data()) mu_norm += static_cast<double>(v) * v;
    mu_norm = std::sqrt(mu_norm);
    std::normal_distribution<float> noise(0.0f, 1.0f);
    for (int i = 0; i < n; ++i) {
      const int label = i % 2;
      const float sign = label == 0 ? 1.0f : -1.0f;
      std::span<float> x = ds.images.sample(i);
      for (;;) {
        double proj = 0.0;
        for (int p = 0; p < kPlane; ++p) {
          x[p] = sign * mu[p] + noise(rng);
          proj += static_cast<double>(x[p]) * mu[p];
        }
        if (sign * proj / mu_norm >= kBlobMargin) break;
      }
      ds.labels[i] = label;
    }
  } else {
    std::uniform_int_distribution<int> line(1, kSynthSide - 2);
    std::uniform_real_distribution<float> noise(-0.1f, 0.1f);
    for (int i = 0; i < n; ++i) {
      const int label = i % 2;
      const int at = line(rng);
      std::span<float> x = ds.images.sample(i);
      for (int r = 0; r < kSynthSide; ++r) {
        for (int c = 0; c < kSynthSide; ++c) {
          const bool on = label == 0 ? r == at : c == at;
          x[r * kSynthSide + c] = (on ? 1.0f : 0.0f) + noise(rng);
        }
      }
      ds.labels[i] = label;
    }
  }
  return ds;
}

LabeledDataset slice(const LabeledDataset& ds, std::size_t begin, std::size_t end) {
  if (begin > end || end > ds.size()) throw InputError("slice: range outside dataset");
  const Shape s = ds.images.shape();
  LabeledDataset out;
  out.images = Tensor({static_cast<int>(end - begin), s.c, s.h, s.w});
  const std::size_t per = s.sample_size();
  std::memcpy(out.images.raw(), ds.images.raw() + begin * per,
              (end - begin) * per * sizeof(float));
  out.labels.assign(ds.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                    ds.labels.begin() + static_cast<std::ptrdiff_t>(end));
  out.num_classes = ds.num_classes;
  out.stats = ds.stats;
  return out;
}

// ---------------------------------------------------------------------------
// DMW1

namespace {

constexpr char kMagic[4] = {'D', 'M', 'W', '1'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class WeightReader {
 public:
  explicit WeightReader(std::string_view b) : bytes_(b) {}

  template <typename T>
  T get(const std::string& where) {
    T v;
    std::memcpy(&v, take(sizeof(T), where), sizeof(T));
    return v;
  }
  const char* take(std::size_t n, const std::string& where) {
    if (pos_ + n > bytes_.size()) {
      throw FormatError("DMW1: truncated while reading " + where + " (offset " +
                        std::to_string(pos_) + ", need " + std::to_string(n) +
                        " bytes, have " + std::to_string(bytes_.size() - pos_) + ")");
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string dims_string(const std::vector<std::uint32_t>& d) {
  std::string s;
  for (std::size_t i = 0; i < d.size(); ++i) s += (i ? "x" : "") + std::to_string(d[i]);
  return s;
}

}  // namespace

std::string save_weights(Model& model) {
  std::string out(kMagic, 4);
  const std::vector<NamedLayerParams> layers = model.parameters();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(layers.size()));
  for (const NamedLayerParams& l : layers) {
    put<std::uint16_t>(out, static_cast<std::uint16_t>(l.name.size()));
    out += l.name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(l.tensors.size()));
    for (const ParamRef& p : l.tensors) {
      put<std::uint8_t>(out, static_cast<std::uint8_t>(p.dims.size()));
      for (std::uint32_t d : p.dims) put<std::uint32_t>(out, d);
      out.append(reinterpret_cast<const char*>(p.value->raw()), p.value->size() * sizeof(float));
    }
  }
  return out;
}

void load_weights_into(Model& model, std::string_view bytes) {
  WeightReader in(bytes);
  const char* magic = in.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("DMW1: bad magic '" + std::string(magic, 4) + "', expected 'DMW1'");
  }
  std::vector<NamedLayerParams> layers = model.parameters();
  const auto count = in.get<std::uint32_t>("layer count");
  if (count != layers.size()) {
    throw FormatError("DMW1: file has " + std::to_string(count) + " layers, model '" +
                      model.spec().name + "' has " + std::to_string(layers.size()));
  }
  for (NamedLayerParams& l : layers) {
    const std::string where = "layer '" + l.name + "'";
    const auto len = in.get<std::uint16_t>(where + " name length");
    const std::string name(in.take(len, where + " name"), len);
    if (name != l.name) {
      throw FormatError("DMW1: expected layer '" + l.name + "', found '" + name + "'");
    }
    const auto nt = in.get<std::uint8_t>(where + " tensor count");
    if (nt != l.tensors.size()) {
      throw FormatError("DMW1: " + where + " has " + std::to_string(nt) + " tensors, expected " +
                        std::to_string(l.tensors.size()));
    }
    for (ParamRef& p : l.tensors) {
      const std::string tw = where + " tensor '" + p.name + "'";
      const auto rank = in.get<std::uint8_t>(tw + " rank");
      std::vector<std::uint32_t> dims(rank);
      for (auto& d : dims) d = in.get<std::uint32_t>(tw + " dims");
      if (dims != p.dims) {
        throw FormatError("DMW1: " + tw + " is " + dims_string(dims) + ", model expects " +
                          dims_string(p.dims));
      }
      const std::size_t nbytes = p.value->size() * sizeof(float);
      std::memcpy(p.value->raw(), in.take(nbytes, tw + " payload"), nbytes);
    }
  }
  if (in.remaining() != 0) {
    throw FormatError("DMW1: " + std::to_string(in.remaining()) + " trailing bytes");
  }
}

Model load_weights(std::string_view bytes, const ModelSpec& spec) {
  Model m(spec);
  load_weights_into(m, bytes);
  return m;
}

}  // namespace decomposeme
