#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "histovit/hvwt.hpp"
#include "histovit/image_io.hpp"
#include "support/temp_dir.hpp"

namespace fs = std::filesystem;
using namespace histovit;

namespace {

struct Run {
  int code;
  std::string output;
};

Run run(const std::string& args) {
  const std::string cmd = std::string(HISTOVIT_CLI) + " " + args + " 2>&1";
  FILE* p = ::popen(cmd.c_str(), "r");
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) out.append(buf, n);
  const int status = ::pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    ASSERT_EQ(run("synth " + (dir / "data").string() + " --classes 3 --per-class 20 --size 40").code, 0);
    std::ofstream cfg(dir / "toy.cfg");
    cfg << "image_size = 32\npatch_size = 16\nembed_dim = 16\ndepth = 2\nnum_heads = 2\nhead_widths = 32,16\n"
           "learning_rate = 1e-3\nbatch_size = 8\nmax_epochs = 3\nbootstrap_resamples = 100\n";
  }

  std::string base(const std::string& out) const {
    return "--config " + (dir / "toy.cfg").string() + " --data " + (dir / "data").string() + " --out " + (dir / out).string();
  }

  test_support::TempDir dir;
};

}  // namespace

TEST_F(Cli, TrainWritesAllArtifacts) {
  const auto r = run(base("run") + " train");
  ASSERT_EQ(r.code, 0) << r.output;
  for (const char* f : {"config.echo", "best.hvwt", "history.csv", "splits.tsv", "metrics.json", "metrics_tta.json",
                        "train.log", "confusion.csv", "roc.csv"}) {
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  }
  const auto m = nlohmann::json::parse(slurp(dir / "run" / "metrics.json"));
  EXPECT_EQ(m["samples"], 12);
  EXPECT_FALSE(m["tta"].get<bool>());
  EXPECT_TRUE(nlohmann::json::parse(slurp(dir / "run" / "metrics_tta.json"))["tta"].get<bool>());
  EXPECT_EQ(lines(slurp(dir / "run" / "splits.tsv")).size(), 60u);
  EXPECT_EQ(lines(slurp(dir / "run" / "history.csv")).size(), 4u);
  EXPECT_FALSE(fs::exists(dir / ".run.partial"));
}

TEST_F(Cli, RerunIsByteIdentical) {
  ASSERT_EQ(run(base("run") + " --seed 5 train").code, 0);
  std::map<std::string, std::string> first;
  for (const auto& e : fs::directory_iterator(dir / "run")) first[e.path().filename()] = slurp(e.path());
  ASSERT_EQ(run(base("run") + " --seed 5 train").code, 0);
  for (const auto& [name, bytes] : first) {
    if (name == "train.log") continue;
    EXPECT_EQ(slurp(dir / "run" / name), bytes) << name;
  }
}

TEST_F(Cli, MissingDataFailsWithoutArtifacts) {
  const auto r = run("--config " + (dir / "toy.cfg").string() + " --data " + (dir / "nowhere").string() + " --out " +
                     (dir / "out").string() + " train");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("error:"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "out"));
  EXPECT_FALSE(fs::exists(dir / ".out.partial"));
}

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("--no-such-flag train").code, 2);
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("--precision f16 train").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, ConfigErrorsExitOne) {
  EXPECT_EQ(run(base("x") + " --set nonsense=1 train").code, 1);
  std::ofstream(dir / "dup.cfg") << "seed = 1\nseed = 2\n";
  EXPECT_EQ(run("--config " + (dir / "dup.cfg").string() + " train").code, 1);
  EXPECT_EQ(run(base("x") + " --set batch_size=1 train").code, 1);
}

TEST_F(Cli, FlagsOverrideConfigFile) {
  ASSERT_EQ(run(base("run") + " --seed 11 --set max_epochs=1 --precision f64 train").code, 0);
  const std::string echo = slurp(dir / "run" / "config.echo");
  EXPECT_NE(echo.find("seed = 11\n"), std::string::npos);
  EXPECT_NE(echo.find("max_epochs = 1\n"), std::string::npos);
  EXPECT_NE(echo.find("precision = f64\n"), std::string::npos);
  EXPECT_NE(echo.find("num_classes = 3\n"), std::string::npos);
  EXPECT_EQ(read_hvwt_file(dir / "run" / "best.hvwt").front().dtype, DType::f64);
}

TEST_F(Cli, GridSearchDefaultSpaceEmitsRankedLines) {
  const auto r = run(base("grid") + " --set grid_max_epochs=1 --set grid_threads=4 gridsearch");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto ls = lines(slurp(dir / "grid" / "grid.jsonl"));
  ASSERT_EQ(ls.size(), 81u);
  std::vector<nlohmann::json> rows;
  std::set<int> cells;
  for (const auto& l : ls) {
    rows.push_back(nlohmann::json::parse(l));
    cells.insert(rows.back()["cell"].get<int>());
  }
  EXPECT_EQ(cells.size(), 81u);
  auto sorted = rows;
  std::sort(sorted.begin(), sorted.end(), [](const nlohmann::json& a, const nlohmann::json& b) {
    return std::make_tuple(-a["val_accuracy"].get<double>(), a["learning_rate"].get<double>(), a["weight_decay"].get<double>(),
                           a["cell"].get<int>()) < std::make_tuple(-b["val_accuracy"].get<double>(), b["learning_rate"].get<double>(),
                                                                   b["weight_decay"].get<double>(), b["cell"].get<int>());
  });
  EXPECT_EQ(sorted, rows);
}

TEST_F(Cli, GridSearchSingleCell) {
  const auto r = run(base("grid") +
                     " --set grid_learning_rates=1e-3 --set grid_weight_decays=1e-4 --set grid_dropouts=0.3"
                     " --set grid_batch_sizes=8 --set grid_max_epochs=1 gridsearch");
  ASSERT_EQ(r.code, 0) << r.output;
  const auto ls = lines(slurp(dir / "grid" / "grid.jsonl"));
  ASSERT_EQ(ls.size(), 1u);
  EXPECT_EQ(nlohmann::json::parse(ls[0])["dropout"], 0.3);
}

TEST_F(Cli, CrossValidationReportsFiveFolds) {
  ASSERT_EQ(run(base("cv") + " --set max_epochs=1 crossval").code, 0);
  const auto j = nlohmann::json::parse(slurp(dir / "cv" / "crossval.json"));
  EXPECT_EQ(j["folds"], 5);
  EXPECT_EQ(j["per_fold"].size(), 5u);
  double mean = 0;
  for (const auto& f : j["per_fold"]) mean += f["accuracy"].get<double>() / 5;
  EXPECT_NEAR(j["aggregate"]["accuracy"]["mean"].get<double>(), mean, 1e-12);
}

TEST_F(Cli, EvaluateWithAndWithoutTta) {
  ASSERT_EQ(run(base("run") + " train").code, 0);
  for (const std::string flag : {"", " --tta"}) {
    const auto out = dir / ("eval" + flag.substr(flag.empty() ? 0 : 3) + ".json");
    ASSERT_EQ(run(base("run") + " evaluate --output " + out.string() + flag).code, 0);
    const auto j = nlohmann::json::parse(slurp(out));
    EXPECT_EQ(j["tta"].get<bool>(), !flag.empty());
    long trace = 0, total = 0;
    for (std::size_t t = 0; t < 3; ++t)
      for (std::size_t p = 0; p < 3; ++p) {
        total += j["confusion_matrix"][t][p].get<long>();
        if (t == p) trace += j["confusion_matrix"][t][p].get<long>();
      }
    EXPECT_EQ(j["accuracy"].get<double>(), static_cast<double>(trace) / static_cast<double>(total));
  }
  EXPECT_EQ(slurp(dir / "eval.json"), slurp(dir / "run" / "metrics.json"));
}

TEST_F(Cli, ConstantLogitCheckpointGivesSameReportWithTta) {
  VitConfig vc = VitConfig::toy(3);
  auto model = VitModel<float>::random(vc, 1);
  model.parameter("patch_embed.weight").value.fill(0.0f);
  model.parameter("patch_embed.bias").value.fill(0.0f);
  save_weights(model, dir / "const.hvwt");
  const std::string common = base("x") + " evaluate --checkpoint " + (dir / "const.hvwt").string() + " --split all";
  ASSERT_EQ(run(common + " --output " + (dir / "a.json").string()).code, 0);
  ASSERT_EQ(run(common + " --tta --output " + (dir / "b.json").string()).code, 0);
  auto a = nlohmann::json::parse(slurp(dir / "a.json")), b = nlohmann::json::parse(slurp(dir / "b.json"));
  a.erase("tta");
  b.erase("tta");
  EXPECT_EQ(a, b);
}

TEST_F(Cli, VisualizeIsSideBySideAndDeterministic) {
  ASSERT_EQ(run(base("run") + " --set max_epochs=1 train").code, 0);
  const std::string img = (dir / "data" / "class_1" / "img_0002.png").string();
  for (const char* name : {"a.png", "b.png"}) {
    ASSERT_EQ(run(base("run") + " visualize --image " + img + " --output " + (dir / name).string()).code, 0);
  }
  EXPECT_EQ(slurp(dir / "a.png"), slurp(dir / "b.png"));
  const auto im = load_image(dir / "a.png");
  EXPECT_EQ(im.dim(2), 64u);
  EXPECT_EQ(im.dim(1), 32u);
  const auto bad = run(base("run") + " --set depth=3 visualize --image " + img + " --output " + (dir / "c.png").string());
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.output.find("blocks.2"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "c.png"));
}

TEST_F(Cli, InspectWeightsPrintsTable) {
  auto model = VitModel<float>::random(VitConfig::toy(2), 1);
  save_weights(model, dir / "m.hvwt");
  const auto r = run("inspect-weights " + (dir / "m.hvwt").string());
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.output.find("patch_embed.weight"), std::string::npos);
  EXPECT_NE(r.output.find("[768x16]"), std::string::npos);
  EXPECT_NE(r.output.find(std::to_string(model.parameters().size()) + " tensors"), std::string::npos);
  std::ofstream(dir / "junk.hvwt") << "nope";
  EXPECT_EQ(run("inspect-weights " + (dir / "junk.hvwt").string()).code, 1);
}
