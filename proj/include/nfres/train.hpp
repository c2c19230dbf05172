#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "nfres/data.hpp"
#include "nfres/error.hpp"
#include "nfres/layers.hpp"
#include "nfres/manifest.hpp"
#include "nfres/params.hpp"
#include "nfres/resnet.hpp"
#include "nfres/rng.hpp"

namespace nfres {

struct TrainConfig {
  double lr_max = 0.01;
  double lr_min = 0.0;
  double momentum = 0.9;
  std::size_t batch_size = 128;
  std::size_t epochs = 1;
  std::size_t schedule_epochs = 0;  // cosine horizon; 0 means `epochs`
  double label_smoothing = 0.0;
  bool augment = true;
  bool per_step_cosine = false;
  std::uint64_t seed = 0;  // shuffling and augmentation
  std::size_t eval_batch = 250;

  void validate() const {
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (schedule_epochs != 0 && schedule_epochs < epochs) throw InvalidArgument("schedule_epochs must be >= epochs");
    if (batch_size < 2) throw InvalidArgument("batch_size must be >= 2");
    if (eval_batch < 1) throw InvalidArgument("eval_batch must be >= 1");
    if (!(lr_max >= 0.0) || !(lr_min >= 0.0)) throw InvalidArgument("learning rates must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must be in [0, 1)");
    if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw InvalidArgument("label smoothing must be in [0, 1)");
  }
};

/// lr_min + (lr_max - lr_min) * (1 + cos(pi * t / total)) / 2.
inline double cosine_lr(double step_epoch, double total_epochs, double lr_max, double lr_min) {
  if (!(total_epochs > 0.0) || step_epoch < 0.0 || step_epoch > total_epochs) {
    throw InvalidArgument("cosine_lr: need 0 <= epoch <= total and total > 0");
  }
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * step_epoch / total_epochs));
}

/// v = momentum * v + g; p -= lr * v.
template <typename T>
void sgd_momentum_step(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, double lr, double momentum) {
  if (grad.shape() != param.shape()) throw InvalidArgument("sgd: gradient shape " + shape_string(grad.shape()) +
                                                           " does not match parameter " + shape_string(param.shape()));
  if (velocity.empty()) velocity = Tensor<T>(param.shape());
  if (velocity.shape() != param.shape()) throw InvalidArgument("sgd: velocity shape mismatch");
  auto p = param.mutable_data();
  auto v = velocity.mutable_data();
  const T m = static_cast<T>(momentum), l = static_cast<T>(lr);
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = m * v[i] + grad[i];
    p[i] -= l * v[i];
  }
}

template <typename T>
using Velocity = std::map<std::string, Tensor<T>>;

template <typename T>
void sgd_momentum_step(ParamSet<T>& params, Velocity<T>& velocity, double lr, double momentum) {
  for (auto& [name, p] : params) sgd_momentum_step(p.value, p.grad, velocity[name], lr, momentum);
}

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Mean loss and accuracy in eval mode (running batchnorm statistics).
template <typename T>
EvalResult evaluate(Network<T>& net, const Dataset& data, std::size_t batch = 250) {
  if (data.size() == 0) throw InvalidArgument("evaluate: empty dataset");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double loss = 0.0;
  std::size_t correct = 0;
  const Tensor<T> images = data.images.template cast<T>();
  for (std::size_t first = 0; first < data.size(); first += batch) {
    const std::size_t n = std::min(batch, data.size() - first);
    Tensor<T> x = gather_batch(images, order, first, n);
    NetworkCache<T> cache;
    Tensor<T> logits = net.forward(x, PassMode{BnMode::eval, false}, cache);
    auto r = softmax_xent(logits, std::span<const int>(data.labels.data() + first, n));
    loss += r.loss * static_cast<double>(n);
    correct += r.correct;
  }
  return {loss / static_cast<double>(data.size()),
          static_cast<double>(correct) / static_cast<double>(data.size())};
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

/// Seeded Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> shuffled_order(std::size_t n, RngStream& stream) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(stream.below(i))]);
  return order;
}

/// Row 0 evaluates the network at initialization (train columns measured in
/// eval mode); row e >= 1 averages the training batches of epoch e and
/// evaluates on `test` afterwards. A non-finite loss or activation aborts.
template <typename T>
TrainHistory train(Network<T>& net, const Dataset& train_set, const Dataset& test_set, const TrainConfig& cfg,
                   const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.size() < 2) throw InvalidArgument("train: need at least 2 training examples");
  TrainHistory history;
  {
    EpochRecord r;
    r.lr = cfg.lr_max;
    const EvalResult tr = evaluate(net, train_set, cfg.eval_batch);
    r.train_loss = tr.loss;
    r.train_acc = tr.accuracy;
    r.test_acc = evaluate(net, test_set, cfg.eval_batch).accuracy;
    history.epochs.push_back(r);
    if (on_epoch) on_epoch(r);
  }
  const Tensor<T> images = train_set.images.template cast<T>();
  Velocity<T> velocity;
  const double total = static_cast<double>(cfg.schedule_epochs ? cfg.schedule_epochs : cfg.epochs);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    RngStream shuffle(cfg.seed, "train/shuffle/" + std::to_string(epoch));
    RngStream aug(cfg.seed, "train/augment/" + std::to_string(epoch));
    const auto order = shuffled_order(train_set.size(), shuffle);
    const std::size_t batches = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
    const double epoch_lr = cosine_lr(static_cast<double>(epoch - 1), total, cfg.lr_max, cfg.lr_min);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t first = b * cfg.batch_size;
      const std::size_t n = std::min(cfg.batch_size, train_set.size() - first);
      if (n < 2) continue;  // batchnorm needs two samples
      const double lr = cfg.per_step_cosine
                            ? cosine_lr(static_cast<double>(epoch - 1) + static_cast<double>(b) / batches, total,
                                        cfg.lr_max, cfg.lr_min)
                            : epoch_lr;
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) labels[i] = train_set.labels[order[first + i]];
      Tensor<T> x = augment(gather_batch(images, order, first, n), aug, AugmentConfig{cfg.augment});
      try {
        NetworkCache<T> cache;
        Tensor<T> logits = net.forward(x, PassMode{BnMode::train, true}, cache);
        auto xent = softmax_xent(logits, std::span<const int>(labels), cfg.label_smoothing);
        if (!std::isfinite(xent.loss)) throw NonFinite("loss is " + format_real(xent.loss));
        net.params.zero_grad();
        net.backward(cache, xent.dlogits, true);
        sgd_momentum_step(net.params, velocity, lr, cfg.momentum);
        for (const auto& [name, p] : net.params) ensure_finite(p.value, name.c_str());
        loss_sum += xent.loss * static_cast<double>(n);
        correct += xent.correct;
        seen += n;
      } catch (const NonFinite& e) {
        throw TrainingDiverged(epoch, b + 1, e.what());
      }
    }
    EpochRecord r;
    r.epoch = epoch;
    r.lr = epoch_lr;
    r.train_loss = loss_sum / static_cast<double>(seen);
    r.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    r.test_acc = evaluate(net, test_set, cfg.eval_batch).accuracy;
    history.epochs.push_back(r);
    if (on_epoch) on_epoch(r);
  }
  return history;
}

inline void history_write_csv(const TrainHistory& h, std::ostream& os, const std::string& arch_line,
                              const RunManifest* run = nullptr) {
  if (run) run->write(os);
  os << "# " << arch_line << '\n';
  os << "epoch,lr,train_loss,train_acc,test_acc\n";
  for (const auto& r : h.epochs) {
    os << r.epoch << ',' << format_real(r.lr) << ',' << format_real(r.train_loss) << ','
       << format_real(r.train_acc) << ',' << format_real(r.test_acc) << '\n';
  }
}

inline std::string history_csv_string(const TrainHistory& h, const std::string& arch_line,
                                      const RunManifest* run = nullptr) {
  std::ostringstream os;
  history_write_csv(h, os, arch_line, run);
  return os.str();
}

}  // namespace nfres
