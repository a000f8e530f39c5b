#pragma once

// Dataset ingestion (MNIST IDX, CIFAR-10 binary, synthetic sets) and the DMW1
// weight format.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "decomposeme/model.hpp"
#include "decomposeme/tensor.hpp"

namespace decomposeme {

/// Per-channel standardisation applied as (x - mean) / stddev.
struct NormStats {
  std::vector<float> mean;
  std::vector<float> stddev;

  static NormStats identity(int channels);
};

struct LabeledDataset {
  Tensor images;  // (N, C, H, W)
  std::vector<int> labels;
  int num_classes = 0;
  NormStats stats;

  std::size_t size() const { return labels.size(); }
};

/// Mean and population standard deviation per channel.
NormStats compute_stats(const Tensor& images);
/// Applies `stats` in place and records them on the dataset.
void standardize(LabeledDataset& ds, const NormStats& stats);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

/// IDX image and label files. Pixels scaled to [0, 1]; no standardisation.
LabeledDataset decode_idx(std::string_view image_bytes, std::string_view label_bytes);
LabeledDataset load_idx(const std::filesystem::path& images,
                        const std::filesystem::path& labels);

/// train-*/t10k-* IDX files under `dir`, standardised with train statistics.
std::pair<LabeledDataset, LabeledDataset> load_mnist(const std::filesystem::path& dir);

/// Records of 1 label byte + 3072 pixel bytes; pixels scaled to [0, 1].
/// With `expect_full_batch` the byte count must be exactly 10000 records.
LabeledDataset decode_cifar10(std::string_view bytes, bool expect_full_batch = true,
                              const std::string& origin = "<memory>");
/// data_batch_1..5.bin and test_batch.bin, standardised with train statistics.
std::pair<LabeledDataset, LabeledDataset> load_cifar10_bin(const std::filesystem::path& dir);

enum class SynthKind { blobs, separable_bars };
SynthKind parse_synth_kind(const std::string& s);
std::string to_string(SynthKind k);

/// Image extent of the synthetic sets.
inline constexpr int kSynthSide = 8;

/// blobs: two Gaussian clusters at +/-blob_mean(), kept only when the sample
/// lies at least kBlobMargin from the separating hyperplane <x, mu> = 0. The
/// seed drives the samples only, so sets drawn with different seeds share
/// one distribution.
/// separable_bars: class 0 is a horizontal bar, class 1 a vertical bar, both
/// away from the border, with uniform +/-0.1 noise. Labels alternate 0, 1.
LabeledDataset synth_dataset(SynthKind kind, int n, std::uint64_t seed);
inline constexpr double kBlobMargin = 0.5;
inline constexpr std::uint64_t kBlobMeanSeed = 0x5EED;
/// The generating mean of class 0 for blobs (class 1 uses its negation).
Tensor blob_mean();

/// Copies samples [begin, end).
LabeledDataset slice(const LabeledDataset& ds, std::size_t begin, std::size_t end);

// DMW1: "DMW1", u32 layer count; per layer u16 name length, name, u8 tensor
// count; per tensor u8 rank, rank x u32 dims, f32 payload. Little-endian.
std::string save_weights(Model& model);
void load_weights_into(Model& model, std::string_view bytes);
Model load_weights(std::string_view bytes, const ModelSpec& spec);

}  // namespace decomposeme
