#pragma once

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "histovit/data.hpp"
#include "histovit/metrics.hpp"
#include "histovit/train.hpp"
#include "histovit/transforms.hpp"
#include "histovit/vit.hpp"

namespace histovit {

inline constexpr std::array<const char*, 5> kTtaVariants{"identity", "hflip", "vflip", "rotate+10", "rotate-10"};

/// The five test-time views of a preprocessed input, in kTtaVariants order.
/// Flips and rotations are not composed.
template <typename T>
std::vector<Tensor<T>> tta_variants(const Tensor<T>& x) {
  std::vector<Tensor<T>> v;
  v.reserve(kTtaVariants.size());
  v.push_back(x);
  v.push_back(hflip(x));
  v.push_back(vflip(x));
  v.push_back(rotate(x, 10.0));
  v.push_back(rotate(x, -10.0));
  return v;
}

/// Maps a batch of inputs to [B x C] logits.
template <typename T>
using LogitFn = std::function<Tensor<T>(std::span<const Tensor<T>>)>;

/// Mean of the per-variant softmax probabilities.
template <typename T>
std::vector<double> tta_predict(const LogitFn<T>& logits_of, const Tensor<T>& x) {
  const auto variants = tta_variants(x);
  const Tensor<double> p = softmax_rows(logits_of(std::span<const Tensor<T>>(variants)));
  std::vector<double> mean(p.dim(1), 0.0);
  for (std::size_t v = 0; v < p.dim(0); ++v)
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += p.at(v, c);
  for (double& m : mean) m /= static_cast<double>(p.dim(0));
  return mean;
}

template <typename T>
std::vector<double> tta_predict(const VitModel<T>& model, const Tensor<T>& x) {
  return tta_predict<T>([&](std::span<const Tensor<T>> xs) { return predict_logits(model, xs); }, x);
}

/// Eval-mode class probabilities [n x C] for preprocessed inputs, optionally
/// averaged over the TTA views.
template <typename T>
Tensor<double> predict_probabilities(const VitModel<T>& model, std::span<const Tensor<T>> xs, bool tta,
                                     std::size_t batch_size = 16, std::size_t threads = 1) {
  const std::size_t n = xs.size(), c_count = model.config().num_classes;
  Tensor<double> out({n, c_count});
  if (tta) {
    detail::parallel_for(n, threads, [&](std::size_t i) {
      const auto p = tta_predict(model, xs[i]);
      for (std::size_t c = 0; c < c_count; ++c) out.at(i, c) = p[c];
    });
    return out;
  }
  const std::size_t batches = (n + batch_size - 1) / batch_size;
  detail::parallel_for(batches, threads, [&](std::size_t b) {
    const std::size_t start = b * batch_size, len = std::min(batch_size, n - start);
    const Tensor<double> p = softmax_rows(predict_logits(model, xs.subspan(start, len)));
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t c = 0; c < c_count; ++c) out.at(start + i, c) = p.at(i, c);
  });
  return out;
}

struct Evaluation {
  MetricsReport report;
  std::vector<int> labels;
  Tensor<double> probabilities;
};

/// Metrics of `model` on the samples `idx` of `data`.
template <typename T>
Evaluation evaluate_model(const VitModel<T>& model, const Dataset& data, std::span<const std::size_t> idx,
                          const InputPipeline& pipe, bool tta, const std::optional<BootstrapOptions>& bootstrap) {
  if (idx.empty()) throw ConfigError("evaluation split is empty");
  if (model.config().num_classes != data.num_classes()) {
    throw ContractError("model has " + std::to_string(model.config().num_classes) + " classes, dataset has " +
                        std::to_string(data.num_classes()));
  }
  std::vector<Tensor<T>> xs(idx.size());
  detail::parallel_for(idx.size(), pipe.threads,
                       [&](std::size_t k) { xs[k] = preprocess_eval<T>(data.image(idx[k]), pipe.preprocess); });
  Evaluation e;
  for (std::size_t i : idx) e.labels.push_back(data.sample(i).label);
  e.probabilities = predict_probabilities(model, std::span<const Tensor<T>>(xs), tta, 16, pipe.threads);
  e.report = evaluate_predictions(e.labels, e.probabilities, data.class_names(), bootstrap, tta);
  return e;
}

struct FoldResult {
  std::size_t fold = 0;  // 1-based
  MetricsReport report;
  TrainHistory history;
};

struct CrossValidationResult {
  std::vector<FoldResult> folds;
  std::map<std::string, AggregateMetric> aggregate;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["folds"] = folds.size();
    auto& agg = j["aggregate"];
    for (const auto& [name, a] : aggregate) agg[name] = {{"mean", a.mean}, {"std", a.std}};
    auto& per = j["per_fold"] = nlohmann::ordered_json::array();
    for (const auto& f : folds) {
      auto r = f.report.to_json();
      r["fold"] = f.fold;
      r["best_epoch"] = f.history.best_epoch;
      r["epochs_run"] = f.history.epochs.size();
      per.push_back(r);
    }
    return j;
  }
};

/// Stratified k-fold over `pool`: a fresh model per fold is trained on the
/// fold's training part and evaluated on its held-out part, which also drives
/// model selection and early stopping.
template <typename T>
CrossValidationResult cross_validate(const std::function<VitModel<T>()>& make_model, const Dataset& data,
                                     std::span<const std::size_t> pool, std::size_t k, const TrainConfig& cfg,
                                     const InputPipeline& pipe = {}, bool tta = false,
                                     const std::function<void(const FoldResult&)>& on_fold = {}) {
  const auto folds = stratified_kfold(data.labels(), pool, k, set_global_seed(cfg.seed).split, data.num_classes());
  CrossValidationResult out;
  std::vector<MetricsReport> reports;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    FoldResult r;
    r.fold = f + 1;
    try {
      VitModel<T> model = make_model();
      auto trained = train(model, data, folds[f].train, folds[f].val, cfg, pipe);
      r.history = std::move(trained.history);
      r.report = evaluate_model(trained.best, data, folds[f].val, pipe, tta, std::nullopt).report;
    } catch (const Error&) {
      rethrow_with_context("fold " + std::to_string(f + 1) + ": ");
    }
    reports.push_back(r.report);
    if (on_fold) on_fold(r);
    out.folds.push_back(std::move(r));
  }
  out.aggregate = aggregate_reports(reports);
  return out;
}

}  // namespace histovit
