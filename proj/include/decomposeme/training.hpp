#pragma once

// SGD with momentum, the plateau learning-rate rule, augmentation, the
// training loop and top-1 evaluation.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "decomposeme/data.hpp"
#include "decomposeme/model.hpp"

namespace decomposeme {

struct PlateauConfig {
  int window = 3;
  double min_delta = 0.001;  // absolute train top-1
  double factor = 0.1;
};

struct AugmentConfig {
  int crop_pad = 0;
  double flip_prob = 0.5;
};

struct TrainConfig {
  double lr0 = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 64;
  int epochs = 20;
  PlateauConfig plateau;
  AugmentConfig augment;
  std::uint64_t seed = 1;
  int threads = 1;
  Precision precision = Precision::f64;
};

/// Throws ConfigError when a field is out of range.
void validate(const TrainConfig& cfg);

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_top1 = 0.0;
  double val_top1 = 0.0;
  double gap = 0.0;  // train_top1 - val_top1
};

struct MetricsLog {
  std::vector<EpochMetrics> rows;

  /// `epoch,lr,train_loss,train_top1,val_top1,gap`, floats with 6 decimals.
  std::string to_csv() const;
};

/// g' = g + wd * w (decaying parameters only); v = mu * v + g'; w -= lr * v.
/// `velocity` is created on first use and must then match `params`.
void sgd_momentum_step(std::span<const ParamRef> params, std::vector<Tensor>& velocity,
                       double lr, double momentum, double weight_decay);

/// Learning rate for the next epoch. Every row after the first is an
/// improvement when its train top-1 beats the best of all earlier rows by at
/// least min_delta. The rate drops by `factor` when the last `window` rows
/// (the first row excluded) held no improvement and all ran at the current
/// rate, which also limits the schedule to one drop per window.
double plateau_schedule(const MetricsLog& log, const PlateauConfig& cfg);

/// Zero-pads by crop_pad, takes a uniform random crop of the original
/// extent, then mirrors columns with probability flip_prob. Draw order per
/// call: crop row, crop column (only when crop_pad > 0), then the flip.
Tensor augment(const Tensor& image, const AugmentConfig& cfg, std::mt19937_64& rng);

/// Epochs of shuffled mini-batch SGD; the shuffle and augmentation stream of
/// epoch e are seeded from (cfg.seed, e). Throws InputError on empty data and
/// DivergenceError on a non-finite loss.
MetricsLog train(Model& model, const LabeledDataset& train_set,
                 const LabeledDataset& val_set, const TrainConfig& cfg,
                 const std::function<void(const EpochMetrics&)>& on_epoch = {});

/// Center crop of every sample to h x w.
Tensor center_crop(const Tensor& images, int h, int w);

/// Logits for every sample, center-cropped to the model input when larger.
Tensor predict_logits(Model& model, const LabeledDataset& ds, int batch = 256);

/// Index of the largest value, lowest index on ties.
int argmax(std::span<const float> v);

/// Fraction of samples whose argmax logit equals the label.
double evaluate_top1(Model& model, const LabeledDataset& ds, int batch = 256);

}  // namespace decomposeme
