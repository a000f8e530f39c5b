#include "decomposeme/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <numeric>

#include "decomposeme/error.hpp"

namespace decomposeme {

void validate(const TrainConfig& cfg) {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(cfg.lr0 > 0.0)) fail("lr0 must be > 0");
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) fail("momentum must be in [0, 1)");
  if (cfg.weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (cfg.batch_size < 1) fail("batch_size must be >= 1");
  if (cfg.epochs < 0) fail("epochs must be >= 0");
  if (cfg.plateau.window < 1) fail("plateau window must be >= 1");
  if (cfg.plateau.min_delta < 0.0) fail("plateau min_delta must be >= 0");
  if (!(cfg.plateau.factor > 0.0 && cfg.plateau.factor < 1.0)) {
    fail("plateau factor must be in (0, 1)");
  }
  if (cfg.augment.crop_pad < 0) fail("crop_pad must be >= 0");
  if (cfg.augment.flip_prob < 0.0 || cfg.augment.flip_prob > 1.0) {
    fail("flip_prob must be in [0, 1]");
  }
  if (cfg.threads < 1) fail("threads must be >= 1");
}

std::string MetricsLog::to_csv() const {
  std::string out = "epoch,lr,train_loss,train_top1,val_top1,gap\n";
  char buf[256];
  for (const EpochMetrics& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.epoch, r.lr,
                  r.train_loss, r.train_top1, r.val_top1, r.gap);
    out += buf;
  }
  return out;
}

void sgd_momentum_step(std::span<const ParamRef> params, std::vector<Tensor>& velocity,
                       double lr, double momentum, double weight_decay) {
  if (velocity.empty()) {
    velocity.reserve(params.size());
    for (const ParamRef& p : params) {
      velocity.emplace_back(p.trainable ? Tensor(p.value->shape()) : Tensor());
    }
  }
  if (velocity.size() != params.size()) {
    throw InputError("sgd_momentum_step: velocity holds " + std::to_string(velocity.size()) +
                     " arrays for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ParamRef& p = params[i];
    if (!p.trainable) continue;
    Tensor& w = *p.value;
    const Tensor& g = *p.grad;
    Tensor& v = velocity[i];
    if (!(g.shape() == w.shape()) || !(v.shape() == w.shape())) {
      throw InputError("sgd_momentum_step: '" + p.name + "' value " + to_string(w.shape()) +
                       ", grad " + to_string(g.shape()) + ", velocity " +
                       to_string(v.shape()));
    }
    const double wd = p.decay ? weight_decay : 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = static_cast<double>(g[k]) + wd * w[k];
      const double vk = momentum * v[k] + gk;
      v[k] = static_cast<float>(vk);
      w[k] = static_cast<float>(w[k] - lr * vk);
    }
  }
}

double plateau_schedule(const MetricsLog& log, const PlateauConfig& cfg) {
  if (log.rows.empty()) throw InputError("plateau_schedule: empty log");
  const std::size_t n = log.rows.size();
  const double lr = log.rows.back().lr;
  const std::size_t window = static_cast<std::size_t>(cfg.window);
  if (n < window + 1) return lr;
  double best = log.rows.front().train_top1;
  for (std::size_t e = 1; e < n - window; ++e) best = std::max(best, log.rows[e].train_top1);
  for (std::size_t e = n - window; e < n; ++e) {
    const EpochMetrics& r = log.rows[e];
    if (r.lr != lr) return lr;
    if (r.train_top1 >= best + cfg.min_delta) return lr;
    best = std::max(best, r.train_top1);
  }
  return lr * cfg.factor;
}

Tensor augment(const Tensor& image, const AugmentConfig& cfg, std::mt19937_64& rng) {
  const Shape s = image.shape();
  if (s.n != 1) throw DimensionError("augment: expected one sample, got " + to_string(s));
  if (cfg.crop_pad < 0) throw ConfigError("augment: crop_pad must be >= 0");
  Tensor out(s);
  int oy = 0, ox = 0;
  const int p = cfg.crop_pad;
  if (p > 0) {
    std::uniform_int_distribution<int> offset(0, 2 * p);
    oy = offset(rng) - p;
    ox = offset(rng) - p;
  }
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const bool flip = u(rng) < cfg.flip_prob;
  for (int c = 0; c < s.c; ++c) {
    for (int y = 0; y < s.h; ++y) {
      const int sy = y + oy;
      for (int x = 0; x < s.w; ++x) {
        const int sx = (flip ? s.w - 1 - x : x) + ox;
        out.at(0, c, y, x) =
            (sy >= 0 && sy < s.h && sx >= 0 && sx < s.w) ? image.at(0, c, sy, sx) : 0.0f;
      }
    }
  }
  return out;
}

int argmax(std::span<const float> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = static_cast<int>(i);
  }
  return best;
}

Tensor center_crop(const Tensor& images, int h, int w) {
  const Shape s = images.shape();
  if (s.h < h || s.w < w) {
    throw DimensionError("center_crop: " + to_string(s) + " smaller than " +
                         std::to_string(h) + "x" + std::to_string(w));
  }
  if (s.h == h && s.w == w) return images;
  const int oy = (s.h - h) / 2, ox = (s.w - w) / 2;
  Tensor out({s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < h; ++y) {
        std::memcpy(out.raw() + out.offset(n, c, y, 0),
                    images.raw() + images.offset(n, c, y + oy, ox), w * sizeof(float));
      }
    }
  }
  return out;
}

namespace {

Tensor gather(const LabeledDataset& ds, std::span<const std::size_t> idx) {
  const Shape s = ds.images.shape();
  Tensor batch({static_cast<int>(idx.size()), s.c, s.h, s.w});
  const std::size_t per = s.sample_size();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::memcpy(batch.raw() + i * per, ds.images.raw() + idx[i] * per, per * sizeof(float));
  }
  return batch;
}

void check_channels(const Model& model, const LabeledDataset& ds, const char* what) {
  const Shape& in = model.spec().input;
  const Shape& s = ds.images.shape();
  if (s.c != in.c) {
    throw DimensionError(std::string(what) + ": dataset has " + std::to_string(s.c) +
                         " channels, model expects " + std::to_string(in.c));
  }
}

}  // namespace

Tensor predict_logits(Model& model, const LabeledDataset& ds, int batch) {
  check_channels(model, ds, "predict");
  const Shape& in = model.spec().input;
  const int n = ds.images.shape().n;
  Tensor all;
  std::vector<std::size_t> idx;
  for (int start = 0; start < n; start += batch) {
    const int end = std::min(n, start + batch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), static_cast<std::size_t>(start));
    const Tensor x = center_crop(gather(ds, idx), in.h, in.w);
    const Tensor logits = model.forward(x, Mode::infer);
    if (all.empty()) {
      const Shape ls = logits.shape();
      all = Tensor({n, ls.c, ls.h, ls.w});
    }
    std::memcpy(all.raw() + static_cast<std::size_t>(start) * all.shape().sample_size(),
                logits.raw(), logits.size() * sizeof(float));
  }
  return all;
}

double evaluate_top1(Model& model, const LabeledDataset& ds, int batch) {
  if (ds.size() == 0) throw InputError("evaluate_top1: empty dataset");
  const Tensor logits = predict_logits(model, ds, batch);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (argmax(logits.sample(static_cast<int>(i))) == ds.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

MetricsLog train(Model& model, const LabeledDataset& train_set,
                 const LabeledDataset& val_set, const TrainConfig& cfg,
                 const std::function<void(const EpochMetrics&)>& on_epoch) {
  validate(cfg);
  if (train_set.size() == 0) throw InputError("train: empty training set");
  if (val_set.size() == 0) throw InputError("train: empty validation set");
  check_channels(model, train_set, "train");
  const Shape& in = model.spec().input;
  const Shape& ts = train_set.images.shape();
  if (ts.h != in.h || ts.w != in.w) {
    throw DimensionError("train: samples are " + std::to_string(ts.h) + "x" +
                         std::to_string(ts.w) + ", model '" + model.spec().name +
                         "' expects " + std::to_string(in.h) + "x" + std::to_string(in.w));
  }
  MetricsLog log;
  if (cfg.epochs == 0) return log;

  model.set_exec({cfg.threads, cfg.precision});
  std::vector<ParamRef> params;
  for (NamedLayerParams& lp : model.parameters()) {
    for (ParamRef& p : lp.tensors) params.push_back(p);
  }
  std::vector<Tensor> velocity;
  const bool augmenting = cfg.augment.crop_pad > 0 || cfg.augment.flip_prob > 0.0;
  const std::size_t n = train_set.size();
  double lr = cfg.lr0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed),
                      static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    long batch_index = 0;
    std::vector<int> labels;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      Tensor x = gather(train_set, idx);
      if (augmenting) {
        const std::size_t per = ts.sample_size();
        for (std::size_t i = 0; i < idx.size(); ++i) {
          Tensor one({1, ts.c, ts.h, ts.w});
          std::memcpy(one.raw(), x.raw() + i * per, per * sizeof(float));
          const Tensor a = augment(one, cfg.augment, rng);
          std::memcpy(x.raw() + i * per, a.raw(), per * sizeof(float));
        }
      }
      labels.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = train_set.labels[idx[i]];

      const Tensor logits = model.forward(x, Mode::train);
      const LossResult loss = softmax_cross_entropy(logits, labels);
      if (!std::isfinite(loss.loss)) {
        throw DivergenceError("training diverged: non-finite loss at epoch " +
                                  std::to_string(epoch) + ", batch " +
                                  std::to_string(batch_index) + " (lr " + std::to_string(lr) +
                                  ")",
                              epoch, batch_index);
      }
      model.backward(loss.grad_logits, false);
      sgd_momentum_step(params, velocity, lr, cfg.momentum, cfg.weight_decay);

      loss_sum += loss.loss * static_cast<double>(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (argmax(logits.sample(static_cast<int>(i))) == labels[i]) ++correct;
      }
    }

    EpochMetrics row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = loss_sum / static_cast<double>(n);
    row.train_top1 = static_cast<double>(correct) / static_cast<double>(n);
    row.val_top1 = evaluate_top1(model, val_set);
    row.gap = row.train_top1 - row.val_top1;
    log.rows.push_back(row);
    if (on_epoch) on_epoch(row);
    lr = plateau_schedule(log, cfg.plateau);
  }
  return log;
}

}  // namespace decomposeme
