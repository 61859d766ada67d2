#pragma once

// Softmax cross-entropy, Adam with bias correction, the milestone learning
// rate schedule, the training loop, and evaluation.
//
// The loop is fully deterministic for a fixed seed: shuffling, augmentation
// and weight updates all derive from the run seed, and every reduction has
// a fixed order, so two runs produce bit-identical loss sequences and
// model bytes.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fastnet/cifar.hpp"
#include "fastnet/network.hpp"
#include "fastnet/tensor.hpp"

namespace fastnet {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  double lr0 = 1e-3;
  std::vector<int> milestones = {80, 120, 160, 180};  // epochs at which lr is multiplied by decay_factor
  double decay_factor = 0.1;
  int epochs = 200;
  int batch_size = 128;
  std::uint64_t seed = 0;
  AdamConfig adam;
  bool augment = true;

  void validate() const {
    if (epochs < 1) fail(ErrorCode::invalid_argument, "config: epochs must be >= 1");
    if (batch_size < 1) fail(ErrorCode::invalid_argument, "config: batch_size must be >= 1");
    if (!(decay_factor > 0.0 && decay_factor < 1.0))
      fail(ErrorCode::invalid_argument, "config: decay_factor must be in (0,1)");
    if (!(lr0 > 0.0)) fail(ErrorCode::invalid_argument, "config: lr0 must be positive");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] >= epochs) fail(ErrorCode::invalid_argument, "config: milestone beyond epoch count");
      if (i > 0 && milestones[i] <= milestones[i - 1])
        fail(ErrorCode::invalid_argument, "config: milestones must be strictly increasing");
    }
  }
};

// lr0 * decay_factor^(number of milestones <= epoch)
inline double lr_at_epoch(int epoch, const TrainConfig& cfg) {
  int crossed = 0;
  for (int m : cfg.milestones)
    if (m <= epoch) ++crossed;
  return cfg.lr0 * std::pow(cfg.decay_factor, crossed);
}

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> d_logits;
};

// Mean softmax cross-entropy over the batch, numerically stabilized by a
// per-row max subtraction. dLogits = (softmax - onehot) / N.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) fail(ErrorCode::shape_mismatch, "loss: logits must be (N,C)");
  const int n = logits.extent(0), c = logits.extent(1);
  if (static_cast<std::size_t>(n) != labels.size())
    fail(ErrorCode::shape_mismatch, "loss: label count does not match batch");
  LossResult<T> res;
  res.d_logits = Tensor<T>({n, c});
  double total = 0.0;
  const T inv_n = static_cast<T>(1.0 / static_cast<double>(n));
  for (int i = 0; i < n; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= c)
      fail(ErrorCode::invalid_argument, "loss: label " + std::to_string(label) + " out of [0," +
                                            std::to_string(c) + ")");
    const T* row = logits.data() + static_cast<std::size_t>(i) * c;
    T mx = row[0];
    for (int j = 1; j < c; ++j)
      if (row[j] > mx) mx = row[j];
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(sum) - static_cast<double>(row[label] - mx);
    T* drow = res.d_logits.data() + static_cast<std::size_t>(i) * c;
    const double inv_sum = 1.0 / sum;
    for (int j = 0; j < c; ++j) {
      const double p = std::exp(static_cast<double>(row[j] - mx)) * inv_sum;
      drow[j] = (static_cast<T>(p) - (j == label ? T(1) : T(0))) * inv_n;
    }
  }
  res.loss = total / static_cast<double>(n);
  return res;
}

template <typename T>
struct AdamSlot {
  Tensor<T> m, v;
};

// One Adam update for one parameter tensor. t is the already-incremented
// global step (1 on the first update). Element math runs in binary64.
template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamSlot<T>& slot, long long t, double lr,
               const AdamConfig& cfg) {
  if (grad.shape() != param.shape()) fail(ErrorCode::shape_mismatch, "adam: gradient shape mismatch");
  if (slot.m.empty()) {
    slot.m = Tensor<T>::zeros(param.shape());
    slot.v = Tensor<T>::zeros(param.shape());
  }
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    const double m = b1 * static_cast<double>(slot.m[i]) + (1.0 - b1) * g;
    const double v = b2 * static_cast<double>(slot.v[i]) + (1.0 - b2) * g * g;
    slot.m[i] = static_cast<T>(m);
    slot.v[i] = static_cast<T>(v);
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    param[i] = static_cast<T>(static_cast<double>(param[i]) - lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
  }
}

// Learnable tensors in canonical order: per layer gamma, beta, weight, bias
// (absent slots skipped). Gradients from network_backward line up 1:1.
template <typename T>
std::vector<Tensor<T>*> collect_parameters(ModelState<T>& model) {
  std::vector<Tensor<T>*> out;
  for (auto& layer : model.layers) {
    if (layer.bn.has_value()) {
      out.push_back(&layer.bn->gamma);
      out.push_back(&layer.bn->beta);
    }
    out.push_back(&layer.conv.weight);
    if (layer.conv.has_bias()) out.push_back(&layer.conv.bias);
  }
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> collect_gradients(const std::vector<LayerGrads<T>>& grads) {
  std::vector<const Tensor<T>*> out;
  for (const auto& g : grads) {
    if (!g.gamma.empty()) {
      out.push_back(&g.gamma);
      out.push_back(&g.beta);
    }
    out.push_back(&g.weight);
    if (!g.bias.empty()) out.push_back(&g.bias);
  }
  return out;
}

template <typename T>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

  long long step_count() const { return t_; }

  void step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads, double lr) {
    if (params.size() != grads.size()) fail(ErrorCode::invalid_argument, "adam: parameter/gradient count mismatch");
    if (slots_.empty()) slots_.resize(params.size());
    if (slots_.size() != params.size()) fail(ErrorCode::invalid_argument, "adam: parameter set changed");
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) adam_step(*params[i], *grads[i], slots_[i], t_, lr, cfg_);
  }

 private:
  AdamConfig cfg_;
  std::vector<AdamSlot<T>> slots_;
  long long t_ = 0;
};

// Fraction of records whose argmax logit matches the label; ties break
// toward the lowest class index. Inference mode, per-record results are
// independent of the eval batch size.
template <typename T>
double evaluate(const ModelState<T>& model, const std::vector<CifarRecord>& records, const ChannelStats& stats,
                int batch_size = 256) {
  if (records.empty()) fail(ErrorCode::invalid_argument, "evaluate: empty split");
  std::size_t correct = 0;
  BatchOptions opts;
  opts.batch_size = batch_size;
  for_each_batch(records, stats, opts, [&](const Batch& batch) {
    const Tensor<T> images = batch.images.template cast<T>();
    const Tensor<T> logits = infer_forward(model, images);
    const int c = logits.extent(1);
    for (int i = 0; i < logits.extent(0); ++i) {
      const T* row = logits.data() + static_cast<std::size_t>(i) * c;
      int best = 0;
      for (int j = 1; j < c; ++j)
        if (row[j] > row[best]) best = j;
      if (best == batch.labels[static_cast<std::size_t>(i)]) ++correct;
    }
  });
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double seconds = 0.0;
};

// Returns false to stop training after the current epoch (early stop).
using EpochCallback = std::function<bool(const EpochMetrics&)>;

namespace detail {

// Locate the first layer producing a non-finite activation, for the abort
// diagnostic when the loss goes non-finite.
template <typename T>
std::string first_non_finite_layer(ModelState<T>& model, const Tensor<T>& images) {
  const auto defs = model.spec.layers();
  Tensor<T> act = images;
  if (!act.all_finite()) return "input";
  int pool_index = 0;
  for (std::size_t li = 0; li < defs.size(); ++li) {
    auto& layer = model.layers[li];
    if (layer.bn.has_value())
      act = unit_cell_forward(std::move(act), *layer.bn, layer.conv, Mode::infer);
    else
      act = conv2d_forward(act, layer.conv);
    char name[16];
    std::snprintf(name, sizeof(name), "conv%02d", static_cast<int>(li) + 1);
    if (!act.all_finite()) return name;
    if (defs[li].pool_after) {
      act = maxpool2_forward(act).first;
      ++pool_index;
      if (!act.all_finite()) return "pool" + std::to_string(pool_index);
    }
  }
  act = global_avg_pool(act);
  if (!act.all_finite()) return "gap";
  return "loss";
}

}  // namespace detail

// One epoch: seeded shuffle, optional augmentation, train-mode forward,
// loss, backward, Adam step per batch; then both splits are evaluated in
// inference mode. Aborts with a diagnostic on a non-finite loss. The epoch
// train loss is the sample-weighted mean of batch losses.
template <typename T>
std::vector<EpochMetrics> fit(ModelState<T>& model, const std::vector<CifarRecord>& train_records,
                              const std::vector<CifarRecord>& test_records, const ChannelStats& stats,
                              const TrainConfig& cfg, const EpochCallback& on_epoch = nullptr) {
  cfg.validate();
  if (train_records.empty() || test_records.empty())
    fail(ErrorCode::invalid_argument, "fit: empty train or test split");

  AdamOptimizer<T> optimizer(cfg.adam);
  auto params = collect_parameters(model);
  std::vector<EpochMetrics> history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at_epoch(epoch, cfg);
    double loss_sum = 0.0;
    std::size_t sample_count = 0;
    BatchOptions opts;
    opts.batch_size = cfg.batch_size;
    opts.shuffle = true;
    opts.augment = cfg.augment;
    opts.seed = cfg.seed;
    opts.epoch = static_cast<std::uint64_t>(epoch);
    for_each_batch(train_records, stats, opts, [&](const Batch& batch) {
      const Tensor<T> images = batch.images.template cast<T>();
      ForwardCache<T> cache;
      const Tensor<T> logits = network_forward(model, images, Mode::train, &cache);
      LossResult<T> loss = softmax_cross_entropy(logits, batch.labels);
      if (!std::isfinite(loss.loss)) {
        const std::string layer = detail::first_non_finite_layer(model, images);
        fail(ErrorCode::non_finite, "fit: non-finite loss at epoch " + std::to_string(epoch) +
                                        "; first non-finite activation in " + layer);
      }
      const auto grads = network_backward(model, cache, loss.d_logits);
      optimizer.step(params, collect_gradients(grads), lr);
      loss_sum += loss.loss * static_cast<double>(batch.labels.size());
      sample_count += batch.labels.size();
    });

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(sample_count);
    m.train_acc = evaluate(model, train_records, stats);
    m.test_acc = evaluate(model, test_records, stats);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.push_back(m);
    if (on_epoch && !on_epoch(m)) break;
  }
  return history;
}

}  // namespace fastnet
