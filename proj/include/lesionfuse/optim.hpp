#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lesionfuse/data.hpp"
#include "lesionfuse/fusion.hpp"
#include "lesionfuse/metrics.hpp"
#include "lesionfuse/nn.hpp"
#include "lesionfuse/ops.hpp"

namespace lesionfuse {

/// Numerical failure during training (NaN loss or metric).
class TrainingFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SgdConfig {
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.001;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("optim.lr must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("optim.momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw ConfigError("optim.weight_decay must be >= 0");
  }
  bool operator==(const SgdConfig&) const = default;
};

/// SGD with heavy-ball momentum and coupled weight decay:
///   g' = g + wd * w;  v = mu * v + g';  w -= lr * v
class Sgd {
 public:
  Sgd(std::vector<NamedTensor> params, SgdConfig cfg) : params_(std::move(params)), cfg_(cfg), lr_(cfg.lr) {
    cfg_.validate();
    for (const auto& [name, t] : params_) velocity_.emplace_back(t.size(), 0.0);
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  const SgdConfig& config() const { return cfg_; }
  const std::vector<double>& velocity(std::size_t i) const { return velocity_.at(i); }

  /// Applies one update and clears gradients. Throws ContractError if any registered
  /// parameter did not receive a gradient.
  void step() {
    for (const auto& [name, t] : params_)
      if (!t.has_grad()) throw ContractError("parameter \"" + name + "\" received no gradient");
    for (std::size_t p = 0; p < params_.size(); ++p) {
      Tensor& t = params_[p].second;
      auto w = t.data();
      auto g = t.grad();
      auto& v = velocity_[p];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gd = g[i] + cfg_.weight_decay * w[i];
        v[i] = cfg_.momentum * v[i] + gd;
        w[i] -= lr_ * v[i];
      }
      t.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

 private:
  std::vector<NamedTensor> params_;
  SgdConfig cfg_;
  double lr_;
  std::vector<std::vector<double>> velocity_;
};

enum class MetricMode { minimize, maximize };

namespace detail {
inline bool improves(double metric, double best, MetricMode mode, double threshold) {
  if (std::isnan(best)) return true;
  return mode == MetricMode::minimize ? metric < best - std::abs(best) * threshold
                                      : metric > best + std::abs(best) * threshold;
}
inline void check_metric(double metric, const char* who) {
  if (std::isnan(metric)) throw TrainingFault(std::string(who) + ": NaN metric");
}
}  // namespace detail

struct PlateauConfig {
  std::size_t patience = 10;
  double factor = 0.1;
  double min_lr = 1e-6;
  double threshold = 0.0;  // relative improvement required; 0 = strict
  bool operator==(const PlateauConfig&) const = default;

  void validate() const {
    if (!(factor > 0 && factor < 1)) throw ConfigError("schedule.factor must be in (0, 1)");
    if (!(min_lr >= 0)) throw ConfigError("schedule.min_lr must be >= 0");
    if (!(threshold >= 0)) throw ConfigError("schedule.threshold must be >= 0");
  }
};

/// Reduce-on-plateau. The first observation sets the reference; once more than
/// `patience` consecutive observations fail to improve on the best, lr is multiplied by
/// `factor` (floored at min_lr) and the counter restarts.
///
/// The training loop observes the untrained model as epoch 0, so under a constant loss
/// the reductions land after epochs 11, 22 and 33.
class PlateauScheduler {
 public:
  explicit PlateauScheduler(double lr, PlateauConfig cfg = {}, MetricMode mode = MetricMode::minimize)
      : cfg_(cfg), mode_(mode), lr_(std::max(lr, cfg.min_lr)) {
    cfg_.validate();
  }

  double step(double metric) {
    detail::check_metric(metric, "scheduler");
    if (detail::improves(metric, best_, mode_, cfg_.threshold)) {
      best_ = metric;
      bad_ = 0;
    } else if (++bad_ > cfg_.patience) {
      lr_ = std::max(lr_ * cfg_.factor, cfg_.min_lr);
      bad_ = 0;
    }
    return lr_;
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  std::size_t epochs_since_improvement() const { return bad_; }
  const PlateauConfig& config() const { return cfg_; }

 private:
  PlateauConfig cfg_;
  MetricMode mode_;
  double lr_;
  double best_ = std::numeric_limits<double>::quiet_NaN();
  std::size_t bad_ = 0;
};

class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience = 15, MetricMode mode = MetricMode::minimize, double threshold = 0.0)
      : patience_(patience), mode_(mode), threshold_(threshold) {
    if (patience == 0) throw ConfigError("early-stop patience must be positive");
  }

  /// Returns true once `epoch - best_epoch >= patience`. Ties are not improvements.
  bool update(double metric, std::size_t epoch) {
    detail::check_metric(metric, "early stopper");
    if (last_epoch_ && epoch <= *last_epoch_) throw ContractError("early stopper: epochs must increase");
    last_epoch_ = epoch;
    if (detail::improves(metric, best_, mode_, threshold_)) {
      best_ = metric;
      best_epoch_ = epoch;
    }
    stop_ = epoch - best_epoch_ >= patience_;
    return stop_;
  }

  bool should_stop() const { return stop_; }
  double best() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t patience() const { return patience_; }

 private:
  std::size_t patience_;
  MetricMode mode_;
  double threshold_;
  double best_ = std::numeric_limits<double>::quiet_NaN();
  std::size_t best_epoch_ = 0;
  std::optional<std::size_t> last_epoch_;
  bool stop_ = false;
};

enum class Monitor { val_loss, val_bcc };

inline std::string to_string(Monitor m) { return m == Monitor::val_loss ? "val_loss" : "val_bcc"; }

struct TrainConfig {
  std::size_t max_epochs = 150;
  std::size_t batch_size = 30;
  std::size_t early_stop_patience = 15;
  std::uint64_t seed = 0;
  Monitor monitor = Monitor::val_loss;
  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    if (max_epochs == 0) throw ConfigError("train.max_epochs must be positive");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (early_stop_patience == 0) throw ConfigError("train.early_stop_patience must be positive");
  }
};

/// Model inputs for one split: images [n x C x H x W], encoded metadata [n x d_m], labels.
struct SplitData {
  Tensor images;
  Tensor metadata;
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

/// Rows of a non-differentiable tensor along axis 0.
inline Tensor gather_rows(const Tensor& t, std::span<const std::size_t> rows) {
  const std::size_t per = t.size() / t.dim(0);
  std::vector<double> out(rows.size() * per);
  auto src = t.data();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= t.dim(0)) throw std::out_of_range("gather_rows: row " + std::to_string(rows[r]));
    std::copy_n(src.data() + rows[r] * per, per, out.data() + r * per);
  }
  Shape shape = t.shape();
  shape[0] = rows.size();
  return Tensor(std::move(shape), std::move(out));
}

inline SplitData make_split(const Dataset& ds, const MetadataEncoder& encoder, std::span<const std::size_t> rows) {
  SplitData s;
  s.images = ds.gather_images(rows);
  s.metadata = encoder.transform(ds, rows);
  for (auto r : rows) s.labels.push_back(ds.labels.at(r));
  return s;
}

struct Evaluation {
  double loss = 0;
  double bcc = 0;
  double auc = std::numeric_limits<double>::quiet_NaN();  // NaN when a class is absent
  std::vector<int> predictions;
  std::vector<double> probabilities;  // row-major [n x K]
};

/// Forward pass over a split without recording, in chunks of `chunk` samples.
inline Evaluation evaluate(const FusionModel& model, const SplitData& split, std::size_t classes,
                           std::size_t chunk = 128) {
  if (split.size() == 0) throw ConfigError("evaluation on an empty split");
  NoGradGuard no_grad;
  Evaluation ev;
  ev.probabilities.reserve(split.size() * classes);
  double loss_sum = 0;
  for (std::size_t start = 0; start < split.size(); start += chunk) {
    std::vector<std::size_t> rows(std::min(chunk, split.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    Tensor logits = model.forward(gather_rows(split.images, rows), gather_rows(split.metadata, rows));
    std::span<const int> labels(split.labels.data() + start, rows.size());
    loss_sum += cross_entropy(logits, labels).item() * static_cast<double>(rows.size());
    Tensor probs = softmax(logits);
    auto p = probs.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto row = p.subspan(i * classes, classes);
      ev.predictions.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
      ev.probabilities.insert(ev.probabilities.end(), row.begin(), row.end());
    }
  }
  ev.loss = loss_sum / static_cast<double>(split.size());
  std::vector<bool> seen(classes, false);
  for (int l : split.labels) seen.at(static_cast<std::size_t>(l)) = true;
  const bool all_present = std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
  if (all_present) {
    ev.bcc = balanced_accuracy(split.labels, ev.predictions, classes);
    ev.auc = roc_auc_ovr_macro(split.labels, ev.probabilities, classes);
  } else {
    // Recall averaged over the classes that do occur.
    ConfusionMatrix cm(split.labels, ev.predictions, classes);
    double s = 0;
    std::size_t k_present = 0;
    for (std::size_t k = 0; k < classes; ++k)
      if (cm.row_total(k)) {
        s += static_cast<double>(cm(k, k)) / static_cast<double>(cm.row_total(k));
        ++k_present;
      }
    ev.bcc = s / static_cast<double>(k_present);
  }
  return ev;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_bcc = 0;
  double lr = 0;
  bool operator==(const EpochRecord&) const = default;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 = the untrained model was never beaten
  double best_metric = 0;
  bool stopped_early = false;
};

/// Optional replacement for the monitored value, given (epoch, val_loss, val_bcc).
/// Used to test checkpoint selection against a known metric sequence.
using MonitorOverride = std::function<double(std::size_t, double, double)>;

/// Mini-batch training with validation after every epoch. The untrained model is
/// evaluated first as epoch 0 and seeds the scheduler and the early stopper. On return
/// the model holds the parameters of the best monitored epoch.
inline TrainResult train_model(FusionModel& model, const SplitData& train, const SplitData& val, std::size_t classes,
                               const TrainConfig& tc, const SgdConfig& sc, const PlateauConfig& pc,
                               const MonitorOverride& monitor_override = {}) {
  tc.validate();
  if (train.size() == 0) throw ConfigError("training split is empty");
  if (val.size() == 0) throw ConfigError("validation split is empty");
  const MetricMode mode = tc.monitor == Monitor::val_loss ? MetricMode::minimize : MetricMode::maximize;

  auto params = model.named_parameters();
  Sgd opt(params, sc);
  PlateauScheduler sched(sc.lr, pc, mode);
  EarlyStopper stopper(tc.early_stop_patience, mode, pc.threshold);

  auto snapshot = [&] {
    std::vector<std::vector<double>> s;
    for (const auto& [name, t] : params) s.emplace_back(t.data().begin(), t.data().end());
    return s;
  };
  auto monitored = [&](std::size_t epoch, const Evaluation& ev) {
    double m = tc.monitor == Monitor::val_loss ? ev.loss : ev.bcc;
    if (monitor_override) m = monitor_override(epoch, ev.loss, ev.bcc);
    if (std::isnan(m)) throw TrainingFault("NaN validation metric at epoch " + std::to_string(epoch));
    return m;
  };

  TrainResult result;
  {
    const double m0 = monitored(0, evaluate(model, val, classes));
    sched.step(m0);
    stopper.update(m0, 0);
  }
  auto best_params = snapshot();
  result.best_metric = stopper.best();

  std::vector<std::size_t> rows(train.size());
  std::iota(rows.begin(), rows.end(), 0);
  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    const double lr = sched.lr();
    opt.set_lr(lr);
    double loss_sum = 0;
    const auto batches = batch_iter(rows, tc.batch_size, tc.seed, epoch);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto& batch = batches[b];
      std::vector<int> labels;
      labels.reserve(batch.size());
      for (auto r : batch) labels.push_back(train.labels[r]);
      Tensor logits = model.forward(gather_rows(train.images, batch), gather_rows(train.metadata, batch));
      Tensor loss = cross_entropy(logits, labels);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        Tape::current().clear();
        throw TrainingFault("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(b));
      }
      backward(loss);
      opt.step();
      loss_sum += value * static_cast<double>(batch.size());
    }
    const Evaluation ev = evaluate(model, val, classes);
    result.history.push_back({epoch, loss_sum / static_cast<double>(train.size()), ev.loss, ev.bcc, lr});
    const double m = monitored(epoch, ev);
    sched.step(m);
    const bool stop = stopper.update(m, epoch);
    if (stopper.best_epoch() == epoch) best_params = snapshot();
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  for (std::size_t p = 0; p < params.size(); ++p) params[p].second.assign(best_params[p]);
  result.best_epoch = stopper.best_epoch();
  result.best_metric = stopper.best();
  return result;
}

}  // namespace lesionfuse
