#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "histovit/error.hpp"
#include "histovit/image_io.hpp"
#include "histovit/rng.hpp"

namespace histovit {

struct Sample {
  std::filesystem::path path;  // empty for in-memory samples
  int label = 0;
  std::size_t uid = 0;  // index in dataset order; keys the per-sample RNG stream
};

struct LoadOptions {
  bool validate = true;  // decode every file once so corrupt inputs fail at load time
  bool cache = false;    // keep decoded pixels in memory
};

/// Labelled images in deterministic order. Pixels are decoded on demand
/// unless cached. Every pixel read goes through image(), which reports the
/// sample uid to an optional access hook.
class Dataset {
 public:
  using AccessHook = std::function<void(std::size_t uid)>;

  Dataset() = default;

  /// In-memory dataset (synthetic data, tests).
  static Dataset from_images(std::vector<Image> images, std::vector<int> labels, std::vector<std::string> class_names) {
    if (images.size() != labels.size()) throw ContractError("Dataset: images and labels differ in length");
    Dataset d;
    d.class_names_ = std::move(class_names);
    d.state_ = std::make_shared<State>();
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= d.class_names_.size()) {
        throw IndexError("Dataset: label " + std::to_string(labels[i]) + " out of range");
      }
      d.samples_.push_back(Sample{{}, labels[i], i});
      d.state_->cache.emplace_back(std::move(images[i]));
    }
    return d;
  }

  /// `root/<class>/<file>` with classes and files in lexicographic order.
  static Dataset from_directory(const std::filesystem::path& root, const LoadOptions& opt = {}) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IngestionError("dataset root " + root.string() + " is not a directory");
    std::vector<fs::path> class_dirs;
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw IngestionError("dataset root " + root.string() + " has no class directories");
    Dataset d;
    d.state_ = std::make_shared<State>();
    for (std::size_t c = 0; c < class_dirs.size(); ++c) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(class_dirs[c]))
        if (e.is_regular_file() && is_image_extension(e.path())) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      if (files.empty()) throw IngestionError("class directory " + class_dirs[c].string() + " contains no images");
      d.class_names_.push_back(class_dirs[c].filename().string());
      for (const auto& f : files) {
        const std::size_t uid = d.samples_.size();
        d.samples_.push_back(Sample{f, static_cast<int>(c), uid});
        std::optional<Image> pixels;
        if (opt.validate || opt.cache) {
          Image im = load_image(f);
          if (opt.cache) pixels = std::move(im);
        }
        d.state_->cache.push_back(std::move(pixels));
      }
    }
    return d;
  }

  std::size_t size() const noexcept { return samples_.size(); }
  std::size_t num_classes() const noexcept { return class_names_.size(); }
  const std::vector<std::string>& class_names() const noexcept { return class_names_; }
  const Sample& sample(std::size_t i) const { return samples_.at(i); }
  const std::vector<Sample>& samples() const noexcept { return samples_; }

  std::vector<int> labels() const {
    std::vector<int> out;
    for (const auto& s : samples_) out.push_back(s.label);
    return out;
  }

  /// Decoded pixels of sample i. Thread-safe.
  Image image(std::size_t i) const {
    const Sample& s = samples_.at(i);
    {
      std::lock_guard lock(state_->mutex);
      if (state_->hook) state_->hook(s.uid);
      if (state_->cache[i]) return *state_->cache[i];
    }
    return load_image(s.path);
  }

  void set_access_hook(AccessHook hook) {
    std::lock_guard lock(state_->mutex);
    state_->hook = std::move(hook);
  }

 private:
  struct State {
    std::mutex mutex;
    std::vector<std::optional<Image>> cache;
    AccessHook hook;
  };

  std::vector<std::string> class_names_;
  std::vector<Sample> samples_;
  std::shared_ptr<State> state_ = std::make_shared<State>();
};

inline Dataset load_dataset(const std::filesystem::path& root, const LoadOptions& opt = {}) {
  return Dataset::from_directory(root, opt);
}

// ---------------------------------------------------------------------------
// Splits

struct SplitSpec {
  double train = 0.64;
  double val = 0.16;
  double test = 0.20;
  std::uint64_t seed = 0;
};

/// Dataset indices of each split, ascending.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> members_by_class(std::span<const int> labels, std::span<const std::size_t> pool,
                                                             std::size_t num_classes) {
  std::vector<std::vector<std::size_t>> out(num_classes);
  for (std::size_t idx : pool) {
    const int y = labels[idx];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw IndexError("label " + std::to_string(y) + " out of range");
    out[static_cast<std::size_t>(y)].push_back(idx);
  }
  return out;
}

inline std::size_t infer_classes(std::span<const int> labels) {
  int mx = -1;
  for (int y : labels) mx = std::max(mx, y);
  return static_cast<std::size_t>(mx + 1);
}

}  // namespace detail

/// Per class: seeded shuffle, then round(n * train) to train, round(n * val)
/// to val, the remainder to test.
inline Split stratified_split(std::span<const int> labels, const SplitSpec& spec, std::size_t num_classes = 0) {
  if (spec.train <= 0 || spec.val < 0 || spec.test < 0 || std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative and sum to 1");
  }
  if (num_classes == 0) num_classes = detail::infer_classes(labels);
  std::vector<std::size_t> all(labels.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  auto by_class = detail::members_by_class(labels, all, num_classes);
  Split out;
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& m = by_class[c];
    if (m.size() < 5) {
      throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(m.size()) +
                        " samples; stratified splitting needs at least 5");
    }
    Rng rng(derive_seed(spec.seed, tag("stratified_split"), c));
    rng.shuffle(m);
    const auto n = static_cast<double>(m.size());
    const auto n_train = static_cast<std::size_t>(std::lround(n * spec.train));
    const auto n_val = std::min(m.size() - n_train, static_cast<std::size_t>(std::lround(n * spec.val)));
    out.train.insert(out.train.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.insert(out.val.end(), m.begin() + static_cast<std::ptrdiff_t>(n_train),
                   m.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    out.test.insert(out.test.end(), m.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), m.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

/// k stratified folds over `pool` (dataset indices). Each class is shuffled
/// and cut into k contiguous chunks whose sizes differ by at most one.
inline std::vector<Fold> stratified_kfold(std::span<const int> labels, std::span<const std::size_t> pool, std::size_t k,
                                          std::uint64_t seed, std::size_t num_classes = 0) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2, got " + std::to_string(k));
  if (num_classes == 0) num_classes = detail::infer_classes(labels);
  auto by_class = detail::members_by_class(labels, pool, num_classes);
  std::vector<std::vector<std::size_t>> val(k);
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto& m = by_class[c];
    if (m.empty()) continue;
    if (m.size() < k) {
      throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(m.size()) + " samples, fewer than k = " +
                        std::to_string(k));
    }
    Rng rng(derive_seed(seed, tag("stratified_kfold"), c));
    rng.shuffle(m);
    std::size_t pos = 0;
    for (std::size_t f = 0; f < k; ++f) {
      const std::size_t len = m.size() / k + (f < m.size() % k ? 1 : 0);
      val[f].insert(val[f].end(), m.begin() + static_cast<std::ptrdiff_t>(pos), m.begin() + static_cast<std::ptrdiff_t>(pos + len));
      pos += len;
    }
  }
  std::vector<Fold> folds(k);
  for (std::size_t f = 0; f < k; ++f) {
    std::sort(val[f].begin(), val[f].end());
    folds[f].val = val[f];
    for (std::size_t g = 0; g < k; ++g)
      if (g != f) folds[f].train.insert(folds[f].train.end(), val[g].begin(), val[g].end());
    std::sort(folds[f].train.begin(), folds[f].train.end());
  }
  return folds;
}

/// One `path<TAB>label<TAB>split` line per sample, dataset order.
inline void write_split_manifest(std::ostream& os, const Dataset& data, const Split& split) {
  std::vector<const char*> which(data.size(), nullptr);
  for (std::size_t i : split.train) which.at(i) = "train";
  for (std::size_t i : split.val) which.at(i) = "val";
  for (std::size_t i : split.test) which.at(i) = "test";
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data.sample(i);
    const std::string path = s.path.empty() ? "memory:" + std::to_string(s.uid) : s.path.generic_string();
    os << path << '\t' << s.label << '\t' << (which[i] ? which[i] : "unused") << '\n';
  }
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Class-dependent colour and stripe texture plus per-image noise, offsets and
/// contrast. Classes are easy to separate; images within a class differ.
inline Image synthetic_image(std::size_t label, std::size_t num_classes, std::size_t size, Rng& rng) {
  Image im(Shape{3, size, size});
  const double hue = static_cast<double>(label) / static_cast<double>(std::max<std::size_t>(num_classes, 1));
  std::array<double, 3> base{};
  for (std::size_t c = 0; c < 3; ++c) {
    base[c] = 0.5 + 0.35 * std::cos(2.0 * std::numbers::pi * (hue + static_cast<double>(c) / 3.0));
  }
  const double angle = std::numbers::pi * static_cast<double>(label) / static_cast<double>(std::max<std::size_t>(num_classes, 1));
  const double freq = 2.0 * std::numbers::pi * (2.0 + static_cast<double>(label % 3)) / static_cast<double>(size);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double amp = rng.uniform(0.08, 0.15);
  const double shift = rng.uniform(-0.05, 0.05);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = std::cos(angle) * static_cast<double>(x) + std::sin(angle) * static_cast<double>(y);
      const double stripe = amp * std::sin(freq * u + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = base[c] + shift + stripe + 0.03 * rng.normal();
        im.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return im;
}

inline Dataset make_synthetic_dataset(std::size_t num_classes, std::size_t per_class, std::size_t size, std::uint64_t seed) {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> names;
  for (std::size_t c = 0; c < num_classes; ++c) names.push_back("class_" + std::to_string(c));
  for (std::size_t c = 0; c < num_classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      Rng rng(derive_seed(seed, tag("synthetic"), c, i));
      images.push_back(synthetic_image(c, num_classes, size, rng));
      labels.push_back(static_cast<int>(c));
    }
  return Dataset::from_images(std::move(images), std::move(labels), std::move(names));
}

/// Writes the synthetic set as `root/class_<c>/img_<i>.png`.
inline void write_synthetic_dataset(const std::filesystem::path& root, std::size_t num_classes, std::size_t per_class,
                                    std::size_t size, std::uint64_t seed) {
  namespace fs = std::filesystem;
  const Dataset d = make_synthetic_dataset(num_classes, per_class, size, seed);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Sample& s = d.sample(i);
    const fs::path dir = root / d.class_names()[static_cast<std::size_t>(s.label)];
    fs::create_directories(dir);
    std::ostringstream name;
    name << "img_" << std::setw(4) << std::setfill('0') << (i % per_class) << ".png";
    write_png(dir / name.str(), d.image(i));
  }
}

}  // namespace histovit
