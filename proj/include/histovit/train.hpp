#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "histovit/adam.hpp"
#include "histovit/data.hpp"
#include "histovit/error.hpp"
#include "histovit/hvwt.hpp"
#include "histovit/rng.hpp"
#include "histovit/transforms.hpp"
#include "histovit/vit.hpp"

namespace histovit {

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  double dropout = 0.2;
  std::size_t batch_size = 16;
  std::size_t max_epochs = 100;
  std::size_t early_stop_patience = 8;
  double scheduler_factor = 0.1;
  std::size_t scheduler_patience = 3;
  double min_delta = 0.0;
  double min_lr = 1e-7;
  std::uint64_t seed = 0;
  bool augment = true;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("TrainConfig: " + m); };
    if (!(learning_rate > 0)) fail("learning_rate must be positive");
    if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
    if (!(dropout >= 0 && dropout < 1)) fail("dropout must be in [0, 1)");
    if (batch_size < 2) fail("batch_size must be at least 2 (batch normalisation in the head)");
    if (max_epochs < 1) fail("max_epochs must be at least 1");
    if (early_stop_patience < 1) fail("early_stop_patience must be at least 1");
    if (scheduler_patience < 1) fail("scheduler_patience must be at least 1");
    if (!(scheduler_factor > 0 && scheduler_factor < 1)) fail("scheduler_factor must be in (0, 1)");
    if (!(min_delta >= 0)) fail("min_delta must be non-negative");
    if (!(min_lr >= 0)) fail("min_lr must be non-negative");
  }
};

/// Reduce-on-plateau for a metric that should increase. A value improves on
/// the best so far only if it exceeds it by more than min_delta; after more
/// than `patience` epochs without improvement the rate is multiplied by
/// `factor` (never below min_lr) and the counter restarts.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, std::size_t patience, double min_delta, double min_lr)
      : lr_(lr), factor_(factor), patience_(patience), min_delta_(min_delta), min_lr_(min_lr) {}

  double learning_rate() const noexcept { return lr_; }
  std::size_t bad_epochs() const noexcept { return bad_epochs_; }

  double step(double metric) {
    if (!best_ || metric > *best_ + min_delta_) {
      best_ = metric;
      bad_epochs_ = 0;
    } else {
      ++bad_epochs_;
    }
    if (bad_epochs_ > patience_) {
      lr_ = std::max(lr_ * factor_, min_lr_);
      bad_epochs_ = 0;
    }
    return lr_;
  }

 private:
  double lr_, factor_;
  std::size_t patience_;
  double min_delta_, min_lr_;
  std::optional<double> best_;
  std::size_t bad_epochs_ = 0;
};

/// Stops once the metric has failed to improve (strictly, by more than
/// min_delta) for `patience` consecutive epochs.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience, double min_delta = 0.0) : patience_(patience), min_delta_(min_delta) {}

  bool should_stop(double metric) {
    if (!best_ || metric > *best_ + min_delta_) {
      best_ = metric;
      counter_ = 0;
    } else {
      ++counter_;
    }
    return counter_ >= patience_;
  }

  std::size_t counter() const noexcept { return counter_; }

 private:
  std::size_t patience_;
  double min_delta_;
  std::optional<double> best_;
  std::size_t counter_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0, train_acc = 0;
  double val_loss = 0, val_acc = 0;
  double learning_rate = 0;
  double seconds = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epoch ran
  bool stopped_early = false;

  /// CSV with header. `wall_time = false` writes 0 in the seconds column so
  /// the file is byte-reproducible.
  void write_csv(std::ostream& os, bool wall_time = true) const {
    os << "epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds\n";
    char buf[256];
    for (const auto& e : epochs) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f\n", e.epoch, e.train_loss, e.train_acc, e.val_loss,
                    e.val_acc, e.learning_rate, wall_time ? e.seconds : 0.0);
      os << buf;
    }
  }
};

/// How samples become model inputs.
struct InputPipeline {
  PreprocessOptions preprocess;
  AugmentOptions augment;
  std::size_t threads = 1;
};

template <typename T>
struct TrainResult {
  VitModel<T> best;
  TrainHistory history;
};

struct EpochCallbackInfo {
  const EpochRecord& record;
  bool improved;
};

namespace detail {

// Runs fn(i) for i in [0, n) on up to `threads` threads. Exceptions from
// workers are rethrown on the caller.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

template <typename T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t row) {
  const std::size_t c = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (logits.at(row, j) > logits.at(row, best)) best = j;
  return best;
}

// Consecutive batches of `batch_size`; a trailing batch of one sample is
// folded into the previous batch (batch statistics need two samples).
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch_size) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t start = 0; start < n; start += batch_size) out.emplace_back(start, std::min(n, start + batch_size));
  if (out.size() > 1 && out.back().second - out.back().first == 1) {
    out[out.size() - 2].second = out.back().second;
    out.pop_back();
  }
  return out;
}

}  // namespace detail

/// Eval-mode inputs, computed once per sample and reused across epochs.
template <typename T>
class EvalInputCache {
 public:
  EvalInputCache(const Dataset& data, const InputPipeline& pipe) : data_(&data), pipe_(pipe) {}

  std::vector<Tensor<T>> get(std::span<const std::size_t> idx) {
    std::vector<Tensor<T>> out(idx.size());
    detail::parallel_for(idx.size(), pipe_.threads, [&](std::size_t k) {
      {
        std::lock_guard lock(mutex_);
        auto it = cache_.find(idx[k]);
        if (it != cache_.end()) {
          out[k] = it->second;
          return;
        }
      }
      Tensor<T> x = preprocess_eval<T>(data_->image(idx[k]), pipe_.preprocess);
      std::lock_guard lock(mutex_);
      out[k] = cache_.emplace(idx[k], std::move(x)).first->second;
    });
    return out;
  }

 private:
  const Dataset* data_;
  InputPipeline pipe_;
  std::mutex mutex_;
  std::map<std::size_t, Tensor<T>> cache_;
};

/// Eval-mode loss and accuracy over `idx`.
template <typename T>
std::pair<double, double> evaluate_loss_accuracy(const VitModel<T>& model, EvalInputCache<T>& inputs, const Dataset& data,
                                                 std::span<const std::size_t> idx, std::size_t batch_size) {
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const auto chunk = idx.subspan(start, std::min(batch_size, idx.size() - start));
    const auto xs = inputs.get(chunk);
    std::vector<int> ys;
    for (std::size_t i : chunk) ys.push_back(data.sample(i).label);
    GradTape<T> tape(false);
    auto out = forward(tape, model, std::span<const Tensor<T>>(xs));
    const auto loss = cross_entropy(out.logits, std::span<const int>(ys)).value().item();
    loss_sum += static_cast<double>(loss) * static_cast<double>(chunk.size());
    for (std::size_t r = 0; r < chunk.size(); ++r) correct += detail::argmax_row(out.logits.value(), r) == static_cast<std::size_t>(ys[r]);
  }
  const auto n = static_cast<double>(idx.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

/// Trains the trainable parameters of `model` on `train_idx`, selecting the
/// epoch with the highest validation accuracy (earliest on ties). Only the
/// samples in `train_idx` and `val_idx` are read. `model` ends in its
/// last-epoch state; the returned copy holds the best weights.
template <typename T>
TrainResult<T> train(VitModel<T>& model, const Dataset& data, std::span<const std::size_t> train_idx,
                     std::span<const std::size_t> val_idx, const TrainConfig& cfg, const InputPipeline& pipe = {},
                     const std::function<void(const EpochCallbackInfo&)>& on_epoch = {}) {
  cfg.validate();
  if (train_idx.size() < 2) throw ConfigError("training split needs at least 2 samples, has " + std::to_string(train_idx.size()));
  if (val_idx.empty()) throw ConfigError("validation split is empty");
  const SeedStreams streams = set_global_seed(cfg.seed);

  AdamOptions aopt;
  aopt.learning_rate = cfg.learning_rate;
  aopt.weight_decay = cfg.weight_decay;
  Adam<T> adam(model.trainable_parameters(), aopt);
  PlateauScheduler scheduler(cfg.learning_rate, cfg.scheduler_factor, cfg.scheduler_patience, cfg.min_delta, cfg.min_lr);
  EarlyStopping stopper(cfg.early_stop_patience, cfg.min_delta);
  EvalInputCache<T> eval_inputs(data, pipe);

  TrainResult<T> result{model, {}};
  double best_val = -1.0;
  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = scheduler.learning_rate();
    adam.set_learning_rate(rec.learning_rate);

    std::copy(train_idx.begin(), train_idx.end(), order.begin());
    Rng shuffle_rng(derive_seed(streams.shuffle, epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    const auto ranges = detail::batch_ranges(order.size(), cfg.batch_size);
    for (std::size_t b = 0; b < ranges.size(); ++b) {
      const auto chunk = std::span<const std::size_t>(order).subspan(ranges[b].first, ranges[b].second - ranges[b].first);
      std::vector<Tensor<T>> xs;
      if (cfg.augment) {
        xs.resize(chunk.size());
        detail::parallel_for(chunk.size(), pipe.threads, [&](std::size_t k) {
          const Sample& s = data.sample(chunk[k]);
          Rng aug(derive_seed(streams.augment, epoch, s.uid));
          xs[k] = augment_train<T>(data.image(chunk[k]), aug, pipe.augment, pipe.preprocess);
        });
      } else {
        xs = eval_inputs.get(chunk);
      }
      std::vector<int> ys;
      for (std::size_t i : chunk) ys.push_back(data.sample(i).label);

      Rng dropout_rng(derive_seed(streams.dropout, epoch, b));
      ForwardOptions fo;
      fo.mode = Mode::train;
      fo.rng = &dropout_rng;
      fo.head_dropout = cfg.dropout;
      GradTape<T> tape;
      auto out = forward(tape, model, std::span<const Tensor<T>>(xs), fo);
      auto loss = cross_entropy(out.logits, std::span<const int>(ys));
      const double lv = static_cast<double>(loss.value().item());
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b + 1));
      }
      model.zero_grad();
      tape.backward(loss);
      adam.step();
      loss_sum += lv * static_cast<double>(chunk.size());
      for (std::size_t r = 0; r < chunk.size(); ++r) correct += detail::argmax_row(out.logits.value(), r) == static_cast<std::size_t>(ys[r]);
    }
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    std::tie(rec.val_loss, rec.val_acc) = evaluate_loss_accuracy(std::as_const(model), eval_inputs, data, val_idx, cfg.batch_size);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const bool improved = rec.val_acc > best_val;
    if (improved) {
      best_val = rec.val_acc;
      result.history.best_epoch = epoch;
      copy_weights(model, result.best);
    }
    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(EpochCallbackInfo{result.history.epochs.back(), improved});

    scheduler.step(rec.val_acc);
    if (stopper.should_stop(rec.val_acc)) {
      result.history.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Grid search

struct GridSpace {
  std::vector<double> learning_rates{1e-4, 1e-3, 1e-2};
  std::vector<double> weight_decays{1e-5, 1e-4, 1e-3};
  std::vector<double> dropouts{0.2, 0.3, 0.4};
  std::vector<std::size_t> batch_sizes{16, 32, 64};

  std::size_t size() const { return learning_rates.size() * weight_decays.size() * dropouts.size() * batch_sizes.size(); }

  /// Cartesian product, learning rate outermost.
  std::vector<TrainConfig> cells(const TrainConfig& base) const {
    std::vector<TrainConfig> out;
    for (double lr : learning_rates)
      for (double wd : weight_decays)
        for (double p : dropouts)
          for (std::size_t bs : batch_sizes) {
            TrainConfig c = base;
            c.learning_rate = lr;
            c.weight_decay = wd;
            c.dropout = p;
            c.batch_size = bs;
            out.push_back(c);
          }
    return out;
  }
};

struct GridOptions {
  std::size_t folds = 0;  // 0: hold-out validation; k >= 2: stratified k-fold over train + val
  std::size_t max_epochs = 15;
  std::size_t threads = 1;  // concurrent cells
};

struct GridCellResult {
  std::size_t cell = 0;  // index in GridSpace::cells order
  TrainConfig config;
  double val_accuracy = 0;  // mean over folds in k-fold mode
  double val_loss = 0;
  std::vector<double> fold_val_accuracies;
  std::size_t best_epoch = 0;  // hold-out mode
  std::size_t epochs_run = 0;
};

struct GridReport {
  std::vector<GridCellResult> ranked;  // best first
  const GridCellResult& best() const { return ranked.front(); }
};

/// Best first: higher validation accuracy, then lower learning rate, then
/// lower weight decay, then grid order.
inline void rank_grid(std::vector<GridCellResult>& cells) {
  std::stable_sort(cells.begin(), cells.end(), [](const GridCellResult& a, const GridCellResult& b) {
    if (a.val_accuracy != b.val_accuracy) return a.val_accuracy > b.val_accuracy;
    if (a.config.learning_rate != b.config.learning_rate) return a.config.learning_rate < b.config.learning_rate;
    if (a.config.weight_decay != b.config.weight_decay) return a.config.weight_decay < b.config.weight_decay;
    return a.cell < b.cell;
  });
}

/// Trains every cell of `space` from a fresh model and ranks them by
/// validation accuracy. Only `train_idx` and `val_idx` are ever read; the test
/// split is not an argument.
template <typename T>
GridReport grid_search(const std::function<VitModel<T>()>& make_model, const Dataset& data,
                       std::span<const std::size_t> train_idx, std::span<const std::size_t> val_idx, const GridSpace& space,
                       const TrainConfig& base, const GridOptions& opt, const InputPipeline& pipe = {}) {
  if (space.size() == 0) throw ConfigError("grid search space is empty");
  TrainConfig capped = base;
  capped.max_epochs = opt.max_epochs;
  const auto configs = space.cells(capped);
  for (const auto& c : configs) c.validate();

  std::vector<Fold> folds;
  if (opt.folds >= 2) {
    std::vector<std::size_t> pool(train_idx.begin(), train_idx.end());
    pool.insert(pool.end(), val_idx.begin(), val_idx.end());
    std::sort(pool.begin(), pool.end());
    const auto labels = data.labels();
    folds = stratified_kfold(labels, pool, opt.folds, set_global_seed(base.seed).split, data.num_classes());
  } else if (opt.folds == 1) {
    throw ConfigError("grid search folds must be 0 (hold-out) or at least 2");
  }

  std::vector<GridCellResult> results(configs.size());
  InputPipeline inner = pipe;
  inner.threads = 1;
  detail::parallel_for(configs.size(), opt.threads, [&](std::size_t i) {
    GridCellResult r;
    r.cell = i;
    r.config = configs[i];
    if (folds.empty()) {
      VitModel<T> model = make_model();
      auto res = train(model, data, train_idx, val_idx, configs[i], inner);
      const auto& best = res.history.epochs[res.history.best_epoch - 1];
      r.val_accuracy = best.val_acc;
      r.val_loss = best.val_loss;
      r.best_epoch = res.history.best_epoch;
      r.epochs_run = res.history.epochs.size();
    } else {
      double acc = 0, loss = 0;
      for (const auto& f : folds) {
        VitModel<T> model = make_model();
        auto res = train(model, data, f.train, f.val, configs[i], inner);
        const auto& best = res.history.epochs[res.history.best_epoch - 1];
        r.fold_val_accuracies.push_back(best.val_acc);
        acc += best.val_acc;
        loss += best.val_loss;
        r.epochs_run += res.history.epochs.size();
      }
      r.val_accuracy = acc / static_cast<double>(folds.size());
      r.val_loss = loss / static_cast<double>(folds.size());
    }
    results[i] = std::move(r);
  });
  rank_grid(results);
  return GridReport{std::move(results)};
}

}  // namespace histovit
