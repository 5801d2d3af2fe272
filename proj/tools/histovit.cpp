#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "histovit/attention_viz.hpp"
#include "histovit/evaluate.hpp"
#include "histovit/hvwt.hpp"
#include "histovit/run_config.hpp"

namespace fs = std::filesystem;
using namespace histovit;

namespace {

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string precision;
  std::string data;
  std::vector<std::string> sets;
};

RunConfig resolve_config(const GlobalFlags& g) {
  RunConfig cfg;
  if (!g.config.empty()) apply_config_file(cfg, g.config);
  for (const auto& kv : g.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  if (g.seed) cfg.seed = *g.seed;
  if (!g.out.empty()) cfg.out_dir = g.out;
  if (!g.precision.empty()) cfg.precision = g.precision;
  if (!g.data.empty()) cfg.data_dir = g.data;
  cfg.validate();
  return cfg;
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// Files are written into a hidden staging directory next to the output
// directory and moved into place only when the command succeeds.
class ArtifactDir {
 public:
  explicit ArtifactDir(const fs::path& out) : out_(fs::absolute(out)) {
    stage_ = out_.parent_path() / ("." + out_.filename().string() + ".partial");
    fs::remove_all(stage_);
    fs::create_directories(stage_);
    log_.open(stage_ / "train.log");
  }
  ~ArtifactDir() {
    if (!committed_) {
      std::error_code ec;
      log_.close();
      fs::remove_all(stage_, ec);
    }
  }
  ArtifactDir(const ArtifactDir&) = delete;
  ArtifactDir& operator=(const ArtifactDir&) = delete;

  fs::path path(const std::string& name) const { return stage_ / name; }

  void write(const std::string& name, const std::string& content) {
    std::ofstream f(path(name), std::ios::binary);
    f << content;
    if (!f) throw IoError("cannot write " + path(name).string());
  }

  void log(const std::string& line) {
    log_ << timestamp() << ' ' << line << '\n';
    log_.flush();
    std::cout << line << std::endl;
  }

  void commit() {
    log_.close();
    fs::create_directories(out_);
    for (const auto& e : fs::directory_iterator(stage_)) fs::rename(e.path(), out_ / e.path().filename());
    fs::remove(stage_);
    committed_ = true;
  }

  const fs::path& out() const { return out_; }

 private:
  fs::path out_, stage_;
  std::ofstream log_;
  bool committed_ = false;
};

Dataset open_dataset(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) throw ConfigError("data_dir is not set (use --data or data_dir in the config file)");
  return load_dataset(cfg.data_dir, LoadOptions{.validate = cfg.validate_images, .cache = cfg.cache_images});
}

VitConfig model_config(const RunConfig& cfg, std::size_t num_classes) {
  if (cfg.model.num_classes != 0 && cfg.model.num_classes != num_classes) {
    throw ConfigError("num_classes = " + std::to_string(cfg.model.num_classes) + " but the data has " +
                      std::to_string(num_classes) + " classes");
  }
  VitConfig vc = cfg.model;
  vc.num_classes = num_classes;
  vc.head_dropout = cfg.train.dropout;
  vc.validate();
  return vc;
}

Split make_split(const RunConfig& cfg, const Dataset& data) {
  SplitSpec spec = cfg.split;
  spec.seed = set_global_seed(cfg.seed).split;
  return stratified_split(data.labels(), spec, data.num_classes());
}

template <typename T>
VitModel<T> initial_model(const RunConfig& cfg, const VitConfig& vc) {
  const SeedStreams streams = set_global_seed(cfg.seed);
  if (cfg.pretrained.empty()) return VitModel<T>::random(vc, streams.init);
  return load_weights<T>(fs::path(cfg.pretrained), vc, LoadPolicy::backbone_only_ok, streams.init);
}

std::optional<BootstrapOptions> bootstrap_options(const RunConfig& cfg) {
  if (cfg.bootstrap_resamples == 0) return std::nullopt;
  return BootstrapOptions{.resamples = cfg.bootstrap_resamples, .level = 0.95, .seed = set_global_seed(cfg.seed).bootstrap};
}

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

std::string summary(const MetricsReport& r) {
  std::string s = format("accuracy %.4f  macro P/R/F1 %.4f/%.4f/%.4f", r.accuracy, r.macro.precision, r.macro.recall, r.macro.f1);
  if (r.roc_auc) s += format("  ROC-AUC %.4f", *r.roc_auc);
  if (const auto it = r.ci.find("accuracy"); it != r.ci.end()) s += format("  accuracy CI [%.4f, %.4f]", it->second.low, it->second.high);
  return s;
}

RunConfig with_classes(RunConfig cfg, std::size_t num_classes) {
  cfg.model.num_classes = num_classes;
  return cfg;
}

template <typename T>
int cmd_train(const RunConfig& cfg) {
  const Dataset data = open_dataset(cfg);
  const VitConfig vc = model_config(cfg, data.num_classes());
  const Split split = make_split(cfg, data);
  if (cfg.bootstrap_resamples > 0 && split.test.size() < 10) {
    throw ConfigError("test split has " + std::to_string(split.test.size()) +
                      " samples; confidence intervals need at least 10 (set bootstrap_resamples = 0 to skip them)");
  }
  ArtifactDir out(cfg.out_dir);
  out.write("config.echo", echo_config(with_classes(cfg, vc.num_classes)));
  {
    std::ostringstream os;
    write_split_manifest(os, data, split);
    out.write("splits.tsv", os.str());
  }
  out.log(format("data: %zu images, %zu classes; split %zu/%zu/%zu", data.size(), data.num_classes(), split.train.size(),
                 split.val.size(), split.test.size()));

  VitModel<T> model = initial_model<T>(cfg, vc);
  out.log(format("model: %zu parameters (%zu trainable), precision %s", model.parameter_count(),
                 [&] {
                   std::size_t n = 0;
                   for (auto* p : model.trainable_parameters()) n += p->value.size();
                   return n;
                 }(),
                 cfg.precision.c_str()));
  const InputPipeline pipe = cfg.pipeline();
  auto result = train(model, data, split.train, split.val, cfg.train_config(), pipe, [&](const EpochCallbackInfo& info) {
    const auto& e = info.record;
    out.log(format("epoch %zu: train loss %.4f acc %.4f | val loss %.4f acc %.4f | lr %.2g | %.1fs%s", e.epoch, e.train_loss,
                   e.train_acc, e.val_loss, e.val_acc, e.learning_rate, e.seconds, info.improved ? " *" : ""));
  });
  const auto& h = result.history;
  out.log(format("best epoch %zu of %zu%s", h.best_epoch, h.epochs.size(), h.stopped_early ? " (early stop)" : ""));
  {
    std::ostringstream os;
    h.write_csv(os, cfg.history_wall_time);
    out.write("history.csv", os.str());
  }
  save_weights(result.best, out.path("best.hvwt"));

  const auto boot = bootstrap_options(cfg);
  const auto plain = evaluate_model(result.best, data, split.test, pipe, false, boot);
  const auto tta = evaluate_model(result.best, data, split.test, pipe, true, boot);
  out.write("metrics.json", plain.report.to_json().dump(2) + "\n");
  out.write("metrics_tta.json", tta.report.to_json().dump(2) + "\n");
  {
    std::ostringstream cm, roc;
    plain.report.confusion.write_csv(cm);
    write_roc_csv(roc, plain.labels, plain.probabilities, data.class_names());
    out.write("confusion.csv", cm.str());
    out.write("roc.csv", roc.str());
  }
  out.log("test: " + summary(plain.report));
  out.log("test (TTA): " + summary(tta.report));
  out.commit();
  std::cout << "artifacts written to " << out.out().string() << "\n";
  return 0;
}

template <typename T>
int cmd_gridsearch(const RunConfig& cfg) {
  const Dataset data = open_dataset(cfg);
  const VitConfig vc = model_config(cfg, data.num_classes());
  const Split split = make_split(cfg, data);
  ArtifactDir out(cfg.out_dir);
  out.write("config.echo", echo_config(with_classes(cfg, vc.num_classes)));
  out.log(format("grid: %zu cells, %s, %zu epochs per cell", cfg.grid.size(),
                 cfg.grid_folds ? (std::to_string(cfg.grid_folds) + "-fold").c_str() : "hold-out", cfg.grid_max_epochs));
  GridOptions opt{.folds = cfg.grid_folds, .max_epochs = cfg.grid_max_epochs, .threads = cfg.grid_threads};
  InputPipeline pipe = cfg.pipeline();
  const auto report = grid_search<T>([&] { return initial_model<T>(cfg, vc); }, data, split.train, split.val, cfg.grid,
                                     cfg.train_config(), opt, pipe);
  std::string lines;
  for (std::size_t i = 0; i < report.ranked.size(); ++i) {
    const auto& r = report.ranked[i];
    nlohmann::ordered_json j;
    j["rank"] = i + 1;
    j["cell"] = r.cell;
    j["learning_rate"] = r.config.learning_rate;
    j["weight_decay"] = r.config.weight_decay;
    j["dropout"] = r.config.dropout;
    j["batch_size"] = r.config.batch_size;
    j["val_accuracy"] = r.val_accuracy;
    j["val_loss"] = r.val_loss;
    j["fold_val_accuracies"] = r.fold_val_accuracies;
    j["best_epoch"] = r.best_epoch;
    j["epochs_run"] = r.epochs_run;
    lines += j.dump() + "\n";
  }
  out.write("grid.jsonl", lines);
  const auto& b = report.best();
  out.log(format("best: lr %g, weight decay %g, dropout %g, batch %zu -> val accuracy %.4f", b.config.learning_rate,
                 b.config.weight_decay, b.config.dropout, b.config.batch_size, b.val_accuracy));
  out.commit();
  return 0;
}

template <typename T>
int cmd_crossval(const RunConfig& cfg, bool tta) {
  const Dataset data = open_dataset(cfg);
  const VitConfig vc = model_config(cfg, data.num_classes());
  const Split split = make_split(cfg, data);
  std::vector<std::size_t> pool = split.train;
  pool.insert(pool.end(), split.val.begin(), split.val.end());
  std::sort(pool.begin(), pool.end());
  ArtifactDir out(cfg.out_dir);
  out.write("config.echo", echo_config(with_classes(cfg, vc.num_classes)));
  out.log(format("cross-validation: %zu folds over %zu images (test split held out)", cfg.cv_folds, pool.size()));
  const auto cv = cross_validate<T>([&] { return initial_model<T>(cfg, vc); }, data, pool, cfg.cv_folds, cfg.train_config(),
                                    cfg.pipeline(), tta, [&](const FoldResult& f) {
                                      out.log(format("fold %zu: ", f.fold) + summary(f.report));
                                    });
  out.write("crossval.json", cv.to_json().dump(2) + "\n");
  for (const auto& [name, a] : cv.aggregate) out.log(format("%s: %.4f +- %.4f", name.c_str(), a.mean, a.std));
  out.commit();
  return 0;
}

std::size_t checkpoint_classes(const std::vector<HvwtRecord>& records) {
  for (const auto& r : records)
    if (r.name == "head.out.bias" && r.shape.size() == 1) return r.shape[0];
  throw FormatError("checkpoint has no head.out.bias tensor; cannot infer the number of classes");
}

template <typename T>
VitModel<T> load_checkpoint(const RunConfig& cfg, const fs::path& path) {
  const auto records = read_hvwt_file(path);
  VitConfig vc = cfg.model;
  const std::size_t classes = checkpoint_classes(records);
  if (vc.num_classes != 0 && vc.num_classes != classes) {
    throw ConfigError("num_classes = " + std::to_string(vc.num_classes) + " but the checkpoint has " + std::to_string(classes));
  }
  vc.num_classes = classes;
  return load_weights<T>(records, vc);
}

struct EvaluateFlags {
  std::string checkpoint;
  std::string split = "test";
  std::string output;
  bool tta = false;
};

template <typename T>
int cmd_evaluate(const RunConfig& cfg, const EvaluateFlags& f) {
  const Dataset data = open_dataset(cfg);
  const fs::path ckpt = f.checkpoint.empty() ? fs::path(cfg.out_dir) / "best.hvwt" : fs::path(f.checkpoint);
  const VitModel<T> model = load_checkpoint<T>(cfg, ckpt);
  if (model.config().num_classes != data.num_classes()) {
    throw ContractError("checkpoint has " + std::to_string(model.config().num_classes) + " classes, data has " +
                        std::to_string(data.num_classes()));
  }
  std::vector<std::size_t> idx;
  if (f.split == "all") {
    idx.resize(data.size());
    std::iota(idx.begin(), idx.end(), 0);
  } else {
    const Split s = make_split(cfg, data);
    idx = f.split == "train" ? s.train : f.split == "val" ? s.val : s.test;
  }
  const auto e = evaluate_model(model, data, idx, cfg.pipeline(), f.tta, bootstrap_options(cfg));
  const fs::path output = f.output.empty() ? fs::path(cfg.out_dir) / ("evaluate_" + f.split + (f.tta ? "_tta" : "") + ".json")
                                           : fs::path(f.output);
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  std::ofstream os(output);
  os << e.report.to_json().dump(2) << "\n";
  if (!os) throw IoError("cannot write " + output.string());
  std::cout << f.split << (f.tta ? " (TTA)" : "") << ": " << summary(e.report) << "\nreport written to " << output.string() << "\n";
  return 0;
}

struct VisualizeFlags {
  std::string checkpoint;
  std::string image;
  std::string output;
  std::string csv;
  std::optional<double> alpha;
  std::string aggregation = "mean";
};

template <typename T>
int cmd_visualize(const RunConfig& cfg, const VisualizeFlags& f) {
  const double alpha = f.alpha.value_or(cfg.overlay_alpha);
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("--alpha must be in [0, 1]");
  const fs::path ckpt = f.checkpoint.empty() ? fs::path(cfg.out_dir) / "best.hvwt" : fs::path(f.checkpoint);
  const VitModel<T> model = load_checkpoint<T>(cfg, ckpt);
  const Image raw = load_image(f.image);
  const auto e = explain(model, raw, cfg.preprocess(), f.aggregation == "max" ? HeadAggregation::max : HeadAggregation::mean);
  const fs::path output = f.output.empty() ? fs::path(cfg.out_dir) / "attention.png" : fs::path(f.output);
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  write_png(output, render_overlay(e.view, e.heatmap, alpha));
  if (!f.csv.empty()) {
    std::ofstream os(f.csv);
    write_heatmap_csv(os, e.heatmap);
    if (!os) throw IoError("cannot write " + f.csv);
  }
  std::cout << "class probabilities:";
  for (double p : e.probabilities) std::cout << format(" %.4f", p);
  std::cout << (e.heatmap.flat ? "\nattention map is flat" : "") << "\noverlay written to " << output.string() << "\n";
  return 0;
}

int cmd_inspect(const std::string& file) {
  const auto records = read_hvwt_file(file);
  std::size_t name_w = 4;
  for (const auto& r : records) name_w = std::max(name_w, r.name.size());
  std::cout << std::left << std::setw(static_cast<int>(name_w)) << "name" << "  dtype  " << std::setw(16) << "shape"
            << "elements\n";
  std::size_t total = 0, bytes = 0;
  for (const auto& r : records) {
    const std::size_t n = shape_size(r.shape);
    total += n;
    bytes += r.payload.size();
    std::cout << std::setw(static_cast<int>(name_w)) << r.name << "  " << std::setw(5) << dtype_name(r.dtype) << "  "
              << std::setw(16) << shape_str(r.shape) << n << "\n";
  }
  std::cout << records.size() << " tensors, " << total << " elements, " << bytes << " payload bytes\n";
  return 0;
}

template <typename F>
int dispatch(const RunConfig& cfg, F&& f) {
  return cfg.precision == "f64" ? f(double{}) : f(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision transformer fine-tuning for histopathology image classification"};
  app.require_subcommand(1);
  GlobalFlags g;
  app.add_option("--config", g.config, "key = value configuration file");
  app.add_option("--seed", g.seed, "global seed");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--precision", g.precision, "arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--data", g.data, "dataset root (one sub-directory per class)");
  app.add_option("--set", g.sets, "override a configuration key (key=value), repeatable");

  auto* train_cmd = app.add_subcommand("train", "train, then evaluate once on the test split")->fallthrough();
  auto* grid_cmd = app.add_subcommand("gridsearch", "hyperparameter grid search on train/val")->fallthrough();
  bool cv_tta = false;
  auto* cv_cmd = app.add_subcommand("crossval", "stratified k-fold cross-validation on train+val")->fallthrough();
  cv_cmd->add_flag("--tta", cv_tta, "test-time augmentation on each fold's held-out part");

  EvaluateFlags ef;
  auto* eval_cmd = app.add_subcommand("evaluate", "metrics of a checkpoint on one split")->fallthrough();
  eval_cmd->add_option("--checkpoint", ef.checkpoint, "HVWT checkpoint (default: <out>/best.hvwt)");
  eval_cmd->add_option("--split", ef.split, "which samples")->check(CLI::IsMember({"test", "val", "train", "all"}));
  eval_cmd->add_option("--output", ef.output, "report path");
  eval_cmd->add_flag("--tta", ef.tta, "average probabilities over flips and +-10 degree rotations");

  VisualizeFlags vf;
  auto* vis_cmd = app.add_subcommand("visualize", "CLS attention overlay for one image")->fallthrough();
  vis_cmd->add_option("--checkpoint", vf.checkpoint, "HVWT checkpoint (default: <out>/best.hvwt)");
  vis_cmd->add_option("--image", vf.image, "input image")->required();
  vis_cmd->add_option("--output", vf.output, "PNG path (default: <out>/attention.png)");
  vis_cmd->add_option("--csv", vf.csv, "also dump the raw grid as CSV");
  vis_cmd->add_option("--alpha", vf.alpha, "overlay opacity in [0, 1]");
  vis_cmd->add_option("--aggregation", vf.aggregation, "head aggregation")->check(CLI::IsMember({"mean", "max"}));

  std::string inspect_file;
  auto* inspect_cmd = app.add_subcommand("inspect-weights", "print the tensor table of an HVWT file");
  inspect_cmd->add_option("file", inspect_file, "HVWT file")->required();

  std::string synth_out;
  std::size_t synth_classes = 3, synth_per_class = 20, synth_size = 32;
  std::uint64_t synth_seed = 0;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic colour/texture dataset");
  synth_cmd->add_option("dir", synth_out, "output root")->required();
  synth_cmd->add_option("--classes", synth_classes)->check(CLI::Range(1, 64));
  synth_cmd->add_option("--per-class", synth_per_class)->check(CLI::Range(1, 100000));
  synth_cmd->add_option("--size", synth_size)->check(CLI::Range(1, 4096));
  synth_cmd->add_option("--synth-seed", synth_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  try {
    if (inspect_cmd->parsed()) return cmd_inspect(inspect_file);
    if (synth_cmd->parsed()) {
      write_synthetic_dataset(synth_out, synth_classes, synth_per_class, synth_size, synth_seed);
      std::cout << "wrote " << synth_classes * synth_per_class << " images to " << synth_out << "\n";
      return 0;
    }
    const RunConfig cfg = resolve_config(g);
    return dispatch(cfg, [&]<typename T>(T) {
      if (train_cmd->parsed()) return cmd_train<T>(cfg);
      if (grid_cmd->parsed()) return cmd_gridsearch<T>(cfg);
      if (cv_cmd->parsed()) return cmd_crossval<T>(cfg, cv_tta);
      if (eval_cmd->parsed()) return cmd_evaluate<T>(cfg, ef);
      return cmd_visualize<T>(cfg, vf);
    });
  } catch (const histovit::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
