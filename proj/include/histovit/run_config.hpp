#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "histovit/data.hpp"
#include "histovit/error.hpp"
#include "histovit/train.hpp"
#include "histovit/transforms.hpp"
#include "histovit/vit_config.hpp"

namespace histovit {

/// Everything a CLI run needs. Loaded from a flat `key = value` file; later
/// sources override earlier ones key by key.
struct RunConfig {
  std::string data_dir;
  std::string out_dir = "run";
  std::uint64_t seed = 0;
  std::string precision = "f32";
  VitConfig model;  // num_classes 0 = infer from the data
  std::string pretrained;  // optional HVWT file; head tensors may be absent
  TrainConfig train;
  SplitSpec split;
  std::size_t resize_size = 0;  // 0 = derived from image_size (256 for 224)
  bool validate_images = true;
  bool cache_images = false;
  std::size_t bootstrap_resamples = 1000;  // 0 disables confidence intervals
  std::size_t threads = 1;
  GridSpace grid;
  std::size_t grid_folds = 0;
  std::size_t grid_max_epochs = 15;
  std::size_t grid_threads = 1;
  std::size_t cv_folds = 5;
  bool history_wall_time = false;  // false: history.csv seconds column is 0
  double overlay_alpha = 0.5;

  RunConfig() { model.num_classes = 0; }

  PreprocessOptions preprocess() const {
    PreprocessOptions p = PreprocessOptions::for_image_size(model.image_size);
    if (resize_size != 0) p.resize = resize_size;
    return p;
  }

  InputPipeline pipeline() const {
    InputPipeline p;
    p.preprocess = preprocess();
    p.threads = threads;
    return p;
  }

  /// Training settings with the run seed applied.
  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }

  void validate() const {
    if (precision != "f32" && precision != "f64") throw ConfigError("precision must be f32 or f64, got '" + precision + "'");
    VitConfig m = model;
    if (m.num_classes == 0) m.num_classes = 2;
    m.validate();
    train.validate();
    if (resize_size != 0 && resize_size < model.image_size) {
      throw ConfigError("resize_size " + std::to_string(resize_size) + " is smaller than image_size " +
                        std::to_string(model.image_size));
    }
    if (threads == 0 || grid_threads == 0) throw ConfigError("thread counts must be positive");
    if (grid_folds == 1) throw ConfigError("grid_folds must be 0 (hold-out) or at least 2");
    if (cv_folds < 2) throw ConfigError("cv_folds must be at least 2");
    if (grid.size() == 0) throw ConfigError("grid search space is empty");
    if (!(overlay_alpha >= 0 && overlay_alpha <= 1)) throw ConfigError("overlay_alpha must be in [0, 1]");
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename V>
V parse_number(const std::string& key, const std::string& text) {
  V v{};
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end) throw ConfigError("key '" + key + "': cannot parse '" + text + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("key '" + key + "': expected a boolean, got '" + text + "'");
}

template <typename V>
std::vector<V> parse_list(const std::string& key, const std::string& text) {
  std::vector<V> out;
  if (trim(text).empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<V>(key, trim(item)));
  return out;
}

template <typename V>
std::string format_number(V v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename V>
std::string format_list(const std::vector<V>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_number(v[i]);
  return s;
}

struct ConfigKey {
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename V>
ConfigKey number_key(V RunConfig::*field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_number<V>(k, v); },
          [field](const RunConfig& c) { return format_number(c.*field); }};
}

template <typename Sub, typename V>
ConfigKey nested_number_key(Sub RunConfig::*sub, V Sub::*field) {
  return {[=](RunConfig& c, const std::string& k, const std::string& v) { (c.*sub).*field = parse_number<V>(k, v); },
          [=](const RunConfig& c) { return format_number((c.*sub).*field); }};
}

template <typename Sub, typename V>
ConfigKey nested_list_key(Sub RunConfig::*sub, std::vector<V> Sub::*field) {
  return {[=](RunConfig& c, const std::string& k, const std::string& v) { (c.*sub).*field = parse_list<V>(k, v); },
          [=](const RunConfig& c) { return format_list((c.*sub).*field); }};
}

inline ConfigKey string_key(std::string RunConfig::*field) {
  return {[field](RunConfig& c, const std::string&, const std::string& v) { c.*field = v; },
          [field](const RunConfig& c) { return c.*field; }};
}

inline ConfigKey bool_key(bool RunConfig::*field) {
  return {[field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_bool(k, v); },
          [field](const RunConfig& c) { return std::string(c.*field ? "true" : "false"); }};
}

inline const std::map<std::string, ConfigKey>& config_schema() {
  static const std::map<std::string, ConfigKey> schema = [] {
    std::map<std::string, ConfigKey> s;
    s["data_dir"] = string_key(&RunConfig::data_dir);
    s["out_dir"] = string_key(&RunConfig::out_dir);
    s["seed"] = number_key(&RunConfig::seed);
    s["precision"] = string_key(&RunConfig::precision);
    s["pretrained"] = string_key(&RunConfig::pretrained);

    s["image_size"] = nested_number_key(&RunConfig::model, &VitConfig::image_size);
    s["patch_size"] = nested_number_key(&RunConfig::model, &VitConfig::patch_size);
    s["embed_dim"] = nested_number_key(&RunConfig::model, &VitConfig::embed_dim);
    s["depth"] = nested_number_key(&RunConfig::model, &VitConfig::depth);
    s["num_heads"] = nested_number_key(&RunConfig::model, &VitConfig::num_heads);
    s["mlp_ratio"] = nested_number_key(&RunConfig::model, &VitConfig::mlp_ratio);
    s["head_widths"] = nested_list_key(&RunConfig::model, &VitConfig::head_widths);
    s["num_classes"] = nested_number_key(&RunConfig::model, &VitConfig::num_classes);
    s["unfrozen_blocks"] = nested_number_key(&RunConfig::model, &VitConfig::unfrozen_blocks);

    s["learning_rate"] = nested_number_key(&RunConfig::train, &TrainConfig::learning_rate);
    s["weight_decay"] = nested_number_key(&RunConfig::train, &TrainConfig::weight_decay);
    s["dropout"] = nested_number_key(&RunConfig::train, &TrainConfig::dropout);
    s["batch_size"] = nested_number_key(&RunConfig::train, &TrainConfig::batch_size);
    s["max_epochs"] = nested_number_key(&RunConfig::train, &TrainConfig::max_epochs);
    s["early_stop_patience"] = nested_number_key(&RunConfig::train, &TrainConfig::early_stop_patience);
    s["scheduler_factor"] = nested_number_key(&RunConfig::train, &TrainConfig::scheduler_factor);
    s["scheduler_patience"] = nested_number_key(&RunConfig::train, &TrainConfig::scheduler_patience);
    s["min_delta"] = nested_number_key(&RunConfig::train, &TrainConfig::min_delta);
    s["min_lr"] = nested_number_key(&RunConfig::train, &TrainConfig::min_lr);
    s["augment"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.train.augment = parse_bool(k, v); },
                    [](const RunConfig& c) { return std::string(c.train.augment ? "true" : "false"); }};

    s["train_fraction"] = nested_number_key(&RunConfig::split, &SplitSpec::train);
    s["val_fraction"] = nested_number_key(&RunConfig::split, &SplitSpec::val);
    s["test_fraction"] = nested_number_key(&RunConfig::split, &SplitSpec::test);
    s["resize_size"] = number_key(&RunConfig::resize_size);
    s["validate_images"] = bool_key(&RunConfig::validate_images);
    s["cache_images"] = bool_key(&RunConfig::cache_images);
    s["bootstrap_resamples"] = number_key(&RunConfig::bootstrap_resamples);
    s["threads"] = number_key(&RunConfig::threads);

    s["grid_learning_rates"] = nested_list_key(&RunConfig::grid, &GridSpace::learning_rates);
    s["grid_weight_decays"] = nested_list_key(&RunConfig::grid, &GridSpace::weight_decays);
    s["grid_dropouts"] = nested_list_key(&RunConfig::grid, &GridSpace::dropouts);
    s["grid_batch_sizes"] = nested_list_key(&RunConfig::grid, &GridSpace::batch_sizes);
    s["grid_folds"] = number_key(&RunConfig::grid_folds);
    s["grid_max_epochs"] = number_key(&RunConfig::grid_max_epochs);
    s["grid_threads"] = number_key(&RunConfig::grid_threads);
    s["cv_folds"] = number_key(&RunConfig::cv_folds);
    s["history_wall_time"] = bool_key(&RunConfig::history_wall_time);
    s["overlay_alpha"] = number_key(&RunConfig::overlay_alpha);
    return s;
  }();
  return schema;
}

}  // namespace detail

/// Sets one key, rejecting names outside the schema.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& schema = detail::config_schema();
  const auto it = schema.find(key);
  if (it == schema.end()) throw ConfigError("unknown configuration key '" + key + "'");
  it->second.set(cfg, key, value);
}

/// Parses `key = value` lines; `#` starts a comment. Unknown and repeated keys
/// are errors. Values are applied on top of `cfg`.
inline void apply_config_text(RunConfig& cfg, std::istream& in, const std::string& source = "<config>") {
  std::set<std::string> seen;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    const std::string body = detail::trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    try {
      set_config_value(cfg, key, value);
    } catch (const ConfigError&) {
      rethrow_with_context(where);
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  apply_config_text(cfg, in, path.string());
}

/// `key = value` for every schema key, sorted by key.
inline std::string echo_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, def] : detail::config_schema()) out += key + " = " + def.get(cfg) + "\n";
  return out;
}

}  // namespace histovit
