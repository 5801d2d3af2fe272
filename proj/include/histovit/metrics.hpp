#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "histovit/error.hpp"
#include "histovit/rng.hpp"
#include "histovit/tensor.hpp"

namespace histovit {

/// Counts indexed [true][predicted].
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  ConfusionMatrix(std::size_t num_classes, std::vector<std::string> class_names = {})
      : classes_(num_classes), names_(std::move(class_names)), counts_(num_classes * num_classes, 0) {
    if (names_.empty()) {
      for (std::size_t c = 0; c < classes_; ++c) names_.push_back(std::to_string(c));
    }
    if (names_.size() != classes_) {
      throw ContractError("confusion matrix: " + std::to_string(names_.size()) + " class names for " +
                          std::to_string(classes_) + " classes");
    }
  }

  std::size_t num_classes() const noexcept { return classes_; }
  const std::vector<std::string>& class_names() const noexcept { return names_; }

  std::uint64_t& at(std::size_t t, std::size_t p) { return counts_[t * classes_ + p]; }
  std::uint64_t at(std::size_t t, std::size_t p) const { return counts_[t * classes_ + p]; }

  std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }
  std::uint64_t trace() const {
    std::uint64_t s = 0;
    for (std::size_t c = 0; c < classes_; ++c) s += at(c, c);
    return s;
  }
  std::uint64_t row_sum(std::size_t t) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < classes_; ++p) s += at(t, p);
    return s;
  }
  std::uint64_t col_sum(std::size_t p) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < classes_; ++t) s += at(t, p);
    return s;
  }

  /// Header row of predicted class names; one row per true class.
  void write_csv(std::ostream& os) const {
    os << "true\\pred";
    for (const auto& n : names_) os << ',' << n;
    os << '\n';
    for (std::size_t t = 0; t < classes_; ++t) {
      os << names_[t];
      for (std::size_t p = 0; p < classes_; ++p) os << ',' << at(t, p);
      os << '\n';
    }
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_ = 0;
  std::vector<std::string> names_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> pred, std::size_t num_classes,
                                        std::vector<std::string> class_names = {}) {
  if (truth.size() != pred.size()) {
    throw ContractError("confusion_matrix: " + std::to_string(truth.size()) + " labels vs " + std::to_string(pred.size()) +
                        " predictions");
  }
  ConfusionMatrix cm(num_classes, std::move(class_names));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    for (int v : {truth[i], pred[i]}) {
      if (v < 0 || static_cast<std::size_t>(v) >= num_classes) {
        throw IndexError("confusion_matrix: label " + std::to_string(v) + " at position " + std::to_string(i) +
                         " outside [0, " + std::to_string(num_classes) + ")");
      }
    }
    ++cm.at(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(pred[i]));
  }
  return cm;
}

struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0;
  std::uint64_t support = 0;
  bool precision_zero_division = false;  // no predictions of this class
  bool recall_zero_division = false;     // no true samples of this class
  bool f1_zero_division = false;         // precision + recall == 0
};

struct AverageMetrics {
  double precision = 0, recall = 0, f1 = 0;
};

struct Interval {
  double low = 0, high = 0;
};

struct AucResult {
  std::optional<double> macro;                    // mean over classes with a defined AUC
  std::vector<std::optional<double>> per_class;  // absent when the class has no positives or no negatives
};

struct MetricsReport {
  std::vector<std::string> class_names;
  std::vector<ClassMetrics> per_class;
  double accuracy = 0;
  AverageMetrics macro, weighted;
  std::uint64_t samples = 0;
  std::optional<double> roc_auc;
  std::vector<std::optional<double>> roc_auc_per_class;
  std::map<std::string, Interval> ci;  // by metric name, when bootstrapped
  double ci_level = 0;
  std::size_t ci_resamples = 0;
  std::uint64_t seed = 0;
  bool tta = false;
  ConfusionMatrix confusion;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["samples"] = samples;
    j["accuracy"] = accuracy;
    j["macro"] = {{"precision", macro.precision}, {"recall", macro.recall}, {"f1", macro.f1}};
    j["weighted"] = {{"precision", weighted.precision}, {"recall", weighted.recall}, {"f1", weighted.f1}};
    j["roc_auc"] = roc_auc ? nlohmann::ordered_json(*roc_auc) : nlohmann::ordered_json(nullptr);
    auto& classes = j["per_class"] = nlohmann::ordered_json::array();
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      const auto& m = per_class[c];
      nlohmann::ordered_json e;
      e["class"] = class_names[c];
      e["precision"] = m.precision;
      e["recall"] = m.recall;
      e["f1"] = m.f1;
      e["support"] = m.support;
      e["roc_auc"] = c < roc_auc_per_class.size() && roc_auc_per_class[c] ? nlohmann::ordered_json(*roc_auc_per_class[c])
                                                                           : nlohmann::ordered_json(nullptr);
      nlohmann::ordered_json flags = nlohmann::ordered_json::array();
      if (m.precision_zero_division) flags.push_back("precision_zero_division");
      if (m.recall_zero_division) flags.push_back("recall_zero_division");
      if (m.f1_zero_division) flags.push_back("f1_zero_division");
      e["flags"] = flags;
      classes.push_back(e);
    }
    if (!ci.empty()) {
      auto& c = j["confidence_intervals"];
      c["level"] = ci_level;
      c["resamples"] = ci_resamples;
      for (const auto& [name, iv] : ci) c[name] = {iv.low, iv.high};
    }
    auto& cm = j["confusion_matrix"] = nlohmann::ordered_json::array();
    for (std::size_t t = 0; t < confusion.num_classes(); ++t) {
      std::vector<std::uint64_t> row;
      for (std::size_t p = 0; p < confusion.num_classes(); ++p) row.push_back(confusion.at(t, p));
      cm.push_back(row);
    }
    j["seed"] = seed;
    j["tta"] = tta;
    return j;
  }
};

/// Per-class precision, recall and F1 plus accuracy and macro / support-weighted
/// averages. A zero denominator yields 0 and sets the matching flag.
inline MetricsReport classification_report(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw ContractError("classification_report: confusion matrix is empty");
  MetricsReport r;
  r.class_names = cm.class_names();
  r.confusion = cm;
  r.samples = total;
  r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
  const std::size_t c_count = cm.num_classes();
  for (std::size_t c = 0; c < c_count; ++c) {
    ClassMetrics m;
    const double tp = static_cast<double>(cm.at(c, c));
    const std::uint64_t predicted = cm.col_sum(c);
    m.support = cm.row_sum(c);
    if (predicted == 0) {
      m.precision_zero_division = true;
    } else {
      m.precision = tp / static_cast<double>(predicted);
    }
    if (m.support == 0) {
      m.recall_zero_division = true;
    } else {
      m.recall = tp / static_cast<double>(m.support);
    }
    if (m.precision + m.recall == 0.0) {
      m.f1_zero_division = true;
    } else {
      m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    }
    r.per_class.push_back(m);
  }
  for (const auto& m : r.per_class) {
    const double w = static_cast<double>(m.support) / static_cast<double>(total);
    r.macro.precision += m.precision;
    r.macro.recall += m.recall;
    r.macro.f1 += m.f1;
    r.weighted.precision += w * m.precision;
    r.weighted.recall += w * m.recall;
    r.weighted.f1 += w * m.f1;
  }
  const double k = static_cast<double>(c_count);
  r.macro.precision /= k;
  r.macro.recall /= k;
  r.macro.f1 /= k;
  return r;
}

/// Mann-Whitney AUC of `scores` for positives vs the rest, ties at midrank.
/// Empty when either group is empty.
inline std::optional<double> binary_auc(std::span<const double> scores, const std::vector<bool>& positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) {
        rank_sum += midrank;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1) / 2) / (p * static_cast<double>(neg));
}

/// Macro one-vs-rest ROC-AUC. `probs` is [n x C] with rows summing to 1.
inline AucResult roc_auc(std::span<const int> labels, const Tensor<double>& probs) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) {
    throw ContractError("roc_auc: probability matrix " + shape_str(probs.shape()) + " does not match " +
                        std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = labels.size(), c_count = probs.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < c_count; ++c) s += probs.at(i, c);
    if (std::abs(s - 1.0) > 1e-4) {
      throw ContractError("roc_auc: probabilities of sample " + std::to_string(i) + " sum to " + std::to_string(s));
    }
  }
  AucResult out;
  std::vector<double> column(n);
  std::vector<bool> positive(n);
  double sum = 0;
  std::size_t defined = 0;
  for (std::size_t c = 0; c < c_count; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      column[i] = probs.at(i, c);
      positive[i] = labels[i] == static_cast<int>(c);
    }
    out.per_class.push_back(binary_auc(column, positive));
    if (out.per_class.back()) {
      sum += *out.per_class.back();
      ++defined;
    }
  }
  if (defined > 0) out.macro = sum / static_cast<double>(defined);
  return out;
}

struct RocPoint {
  double threshold, fpr, tpr;
};

/// One-vs-rest ROC curve for class `c`: one point per distinct score, from
/// the highest threshold down, preceded by (inf, 0, 0).
inline std::vector<RocPoint> roc_curve(std::span<const int> labels, const Tensor<double>& probs, std::size_t c) {
  const std::size_t n = labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs.at(a, c) > probs.at(b, c); });
  std::size_t pos = 0;
  for (int l : labels) pos += l == static_cast<int>(c);
  const std::size_t neg = n - pos;
  std::vector<RocPoint> pts{{std::numeric_limits<double>::infinity(), 0, 0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < n;) {
    const double thr = probs.at(order[i], c);
    for (; i < n && probs.at(order[i], c) == thr; ++i) (labels[order[i]] == static_cast<int>(c) ? tp : fp)++;
    pts.push_back({thr, neg ? static_cast<double>(fp) / static_cast<double>(neg) : 0.0,
                   pos ? static_cast<double>(tp) / static_cast<double>(pos) : 0.0});
  }
  return pts;
}

inline void write_roc_csv(std::ostream& os, std::span<const int> labels, const Tensor<double>& probs,
                          const std::vector<std::string>& class_names) {
  os << "class,threshold,fpr,tpr\n";
  char buf[128];
  for (std::size_t c = 0; c < probs.dim(1); ++c) {
    for (const auto& p : roc_curve(labels, probs, c)) {
      std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g\n", p.threshold, p.fpr, p.tpr);
      os << class_names.at(c) << buf;
    }
  }
}

struct BootstrapOptions {
  std::size_t resamples = 1000;
  double level = 0.95;
  std::uint64_t seed = 0;
};

/// Linear-interpolated quantile of sorted values.
inline double quantile_sorted(const std::vector<double>& v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Percentile bootstrap. `metric` receives the resampled indices and may
/// return nullopt for resamples where it is undefined; those are dropped.
inline std::optional<Interval> bootstrap_ci(std::size_t n,
                                            const std::function<std::optional<double>(std::span<const std::size_t>)>& metric,
                                            const BootstrapOptions& opt = {}) {
  if (n < 10) throw ConfigError("bootstrap needs at least 10 samples, got " + std::to_string(n));
  if (opt.resamples < 1) throw ConfigError("bootstrap needs at least one resample");
  if (!(opt.level > 0 && opt.level < 1)) throw ConfigError("bootstrap level must be in (0, 1)");
  Rng rng(opt.seed);
  std::vector<std::size_t> idx(n);
  std::vector<double> values;
  values.reserve(opt.resamples);
  for (std::size_t b = 0; b < opt.resamples; ++b) {
    for (auto& i : idx) i = rng.below(n);
    if (auto v = metric(idx)) values.push_back(*v);
  }
  if (values.empty()) return std::nullopt;
  std::sort(values.begin(), values.end());
  const double tail = (1.0 - opt.level) / 2.0;
  return Interval{quantile_sorted(values, tail), quantile_sorted(values, 1.0 - tail)};
}

inline std::vector<int> argmax_rows(const Tensor<double>& probs) {
  std::vector<int> out(probs.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.dim(1); ++c)
      if (probs.at(i, c) > probs.at(i, best)) best = c;
    out[i] = static_cast<int>(best);
  }
  return out;
}

/// Full report from labels and class probabilities: predictions are row
/// argmaxes (lowest index on ties). With `bootstrap` set, 95% (or the given
/// level) intervals are attached for accuracy, macro P/R/F1, weighted F1 and
/// ROC-AUC.
inline MetricsReport evaluate_predictions(std::span<const int> labels, const Tensor<double>& probs,
                                          std::vector<std::string> class_names, const std::optional<BootstrapOptions>& bootstrap,
                                          bool tta = false) {
  const std::size_t c_count = probs.dim(1);
  const auto preds = argmax_rows(probs);
  MetricsReport r = classification_report(confusion_matrix(labels, preds, c_count, std::move(class_names)));
  const AucResult auc = roc_auc(labels, probs);
  r.roc_auc = auc.macro;
  r.roc_auc_per_class = auc.per_class;
  r.tta = tta;
  if (!bootstrap) return r;
  r.seed = bootstrap->seed;
  r.ci_level = bootstrap->level;
  r.ci_resamples = bootstrap->resamples;

  const std::size_t n = labels.size();
  auto resampled_report = [&](std::span<const std::size_t> idx) {
    std::vector<int> t(idx.size()), p(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      t[k] = labels[idx[k]];
      p[k] = preds[idx[k]];
    }
    return classification_report(confusion_matrix(t, p, c_count));
  };
  using Getter = std::function<double(const MetricsReport&)>;
  const std::vector<std::pair<std::string, Getter>> metrics{
      {"accuracy", [](const MetricsReport& m) { return m.accuracy; }},
      {"macro_precision", [](const MetricsReport& m) { return m.macro.precision; }},
      {"macro_recall", [](const MetricsReport& m) { return m.macro.recall; }},
      {"macro_f1", [](const MetricsReport& m) { return m.macro.f1; }},
      {"weighted_f1", [](const MetricsReport& m) { return m.weighted.f1; }},
  };
  for (std::size_t k = 0; k < metrics.size(); ++k) {
    BootstrapOptions o = *bootstrap;
    o.seed = derive_seed(bootstrap->seed, tag(metrics[k].first));
    const auto& get = metrics[k].second;
    auto iv = bootstrap_ci(n, [&](std::span<const std::size_t> idx) -> std::optional<double> { return get(resampled_report(idx)); }, o);
    if (iv) r.ci[metrics[k].first] = *iv;
  }
  BootstrapOptions o = *bootstrap;
  o.seed = derive_seed(bootstrap->seed, tag("roc_auc"));
  auto iv = bootstrap_ci(
      n,
      [&](std::span<const std::size_t> idx) -> std::optional<double> {
        std::vector<int> t(idx.size());
        Tensor<double> pr({idx.size(), c_count});
        for (std::size_t k = 0; k < idx.size(); ++k) {
          t[k] = labels[idx[k]];
          for (std::size_t c = 0; c < c_count; ++c) pr.at(k, c) = probs.at(idx[k], c);
        }
        return roc_auc(t, pr).macro;
      },
      o);
  if (iv) r.ci["roc_auc"] = *iv;
  return r;
}

/// Numerically stable softmax of each row of a [n x C] logit matrix.
template <typename T>
Tensor<double> softmax_rows(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), c_count = logits.dim(1);
  Tensor<double> out({n, c_count});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < c_count; ++c) mx = std::max(mx, static_cast<double>(logits.at(i, c)));
    double s = 0;
    for (std::size_t c = 0; c < c_count; ++c) s += out.at(i, c) = std::exp(static_cast<double>(logits.at(i, c)) - mx);
    for (std::size_t c = 0; c < c_count; ++c) out.at(i, c) /= s;
  }
  return out;
}

/// Sample mean and sample standard deviation (n - 1); std is 0 for one value.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  // Shifted by v[0] so identical values give exactly that value and std 0.
  double shift = 0;
  for (double x : v) shift += x - v[0];
  const double mean = v[0] + shift / static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

struct AggregateMetric {
  double mean = 0, std = 0;
};

/// Mean and sample std over folds of the scalar metrics of each report.
/// ROC-AUC is aggregated only when every fold defines it.
inline std::map<std::string, AggregateMetric> aggregate_reports(const std::vector<MetricsReport>& reports) {
  std::map<std::string, std::vector<double>> values;
  bool all_auc = true;
  for (const auto& r : reports) {
    values["accuracy"].push_back(r.accuracy);
    values["macro_precision"].push_back(r.macro.precision);
    values["macro_recall"].push_back(r.macro.recall);
    values["macro_f1"].push_back(r.macro.f1);
    values["weighted_precision"].push_back(r.weighted.precision);
    values["weighted_recall"].push_back(r.weighted.recall);
    values["weighted_f1"].push_back(r.weighted.f1);
    if (r.roc_auc) {
      values["roc_auc"].push_back(*r.roc_auc);
    } else {
      all_auc = false;
    }
  }
  if (!all_auc) values.erase("roc_auc");
  std::map<std::string, AggregateMetric> out;
  for (const auto& [name, v] : values) {
    const auto [m, s] = mean_std(v);
    out[name] = {m, s};
  }
  return out;
}

}  // namespace histovit
