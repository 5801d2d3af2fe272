#include <gtest/gtest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "histovit/train.hpp"

using namespace histovit;

namespace {

VitConfig toy_config(std::size_t classes = 3) {
  VitConfig cfg = VitConfig::toy(classes);
  cfg.validate();
  return cfg;
}

InputPipeline toy_pipeline() {
  InputPipeline p;
  p.preprocess = PreprocessOptions::for_image_size(32);
  return p;
}

std::vector<std::size_t> range(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

TrainConfig quick_config(std::uint64_t seed = 1) {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.batch_size = 8;
  c.max_epochs = 3;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Scheduler, ImprovingMetricKeepsRate) {
  PlateauScheduler s(1e-4, 0.1, 3, 0.0, 1e-7);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(s.step(0.5 + 0.01 * i), 1e-4);
}

TEST(Scheduler, FlatForPatiencePlusOneEpochsReducesOnce) {
  PlateauScheduler s(1e-4, 0.1, 3, 0.0, 1e-7);
  EXPECT_EQ(s.step(0.7), 1e-4);  // first value sets the reference
  EXPECT_EQ(s.step(0.7), 1e-4);
  EXPECT_EQ(s.step(0.7), 1e-4);
  EXPECT_EQ(s.step(0.7), 1e-4);
  EXPECT_DOUBLE_EQ(s.step(0.7), 1e-5);  // fourth stagnant epoch exceeds patience 3
  EXPECT_EQ(s.bad_epochs(), 0u);
  EXPECT_DOUBLE_EQ(s.step(0.7), 1e-5);
}

TEST(Scheduler, NeverBelowMinimum) {
  PlateauScheduler s(1e-6, 0.1, 1, 0.0, 1e-7);
  for (int i = 0; i < 30; ++i) s.step(0.3);
  EXPECT_EQ(s.learning_rate(), 1e-7);
}

TEST(Scheduler, MinDeltaDefinesImprovement) {
  PlateauScheduler s(1.0, 0.5, 1, 0.05, 0.0);
  s.step(0.5);
  s.step(0.54);  // not an improvement
  EXPECT_EQ(s.step(0.545), 0.5);
}

TEST(EarlyStop, EightStagnantEpochsStop) {
  EarlyStopping e(8);
  EXPECT_FALSE(e.should_stop(0.6));
  for (int i = 0; i < 7; ++i) EXPECT_FALSE(e.should_stop(0.6));
  EXPECT_TRUE(e.should_stop(0.6));
}

TEST(EarlyStop, ImprovementResetsCounter) {
  EarlyStopping e(8);
  e.should_stop(0.6);
  for (int i = 0; i < 7; ++i) EXPECT_FALSE(e.should_stop(0.59));
  EXPECT_FALSE(e.should_stop(0.61));
  EXPECT_EQ(e.counter(), 0u);
  for (int i = 0; i < 7; ++i) EXPECT_FALSE(e.should_stop(0.61));
  EXPECT_TRUE(e.should_stop(0.61));
}

TEST(Batching, TrailingSingletonIsMerged) {
  using R = std::vector<std::pair<std::size_t, std::size_t>>;
  EXPECT_EQ(detail::batch_ranges(32, 16), (R{{0, 16}, {16, 32}}));
  EXPECT_EQ(detail::batch_ranges(33, 16), (R{{0, 16}, {16, 33}}));
  EXPECT_EQ(detail::batch_ranges(17, 16), (R{{0, 17}}));
  EXPECT_EQ(detail::batch_ranges(18, 16), (R{{0, 16}, {16, 18}}));
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.early_stop_patience = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Seeds, SameSeedSameInitDifferentSeedDifferentShuffle) {
  const auto a = set_global_seed(5), b = set_global_seed(5), c = set_global_seed(6);
  EXPECT_EQ(a.init, b.init);
  auto m1 = VitModel<float>::random(toy_config(), a.init);
  auto m2 = VitModel<float>::random(toy_config(), b.init);
  EXPECT_EQ(m1.parameter("pos_embed").value, m2.parameter("pos_embed").value);
  std::vector<std::size_t> x = range(50), y = range(50);
  Rng ra(derive_seed(a.shuffle, 1)), rc(derive_seed(c.shuffle, 1));
  ra.shuffle(x);
  rc.shuffle(y);
  EXPECT_NE(x, y);
  std::set<std::uint64_t> streams{a.init, a.split, a.shuffle, a.dropout, a.augment, a.bootstrap};
  EXPECT_EQ(streams.size(), 6u);
}

TEST(Train, OneStepDecreasesLossOnFixedBatch) {
  int decreased = 0;
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    auto model = VitModel<float>::random(toy_config(), 100 + trial);
    const Dataset d = make_synthetic_dataset(3, 4, 32, trial);
    std::vector<Tensor<float>> xs;
    std::vector<int> ys;
    for (std::size_t i = 0; i < d.size(); ++i) {
      xs.push_back(preprocess_eval(d.image(i), PreprocessOptions::for_image_size(32)));
      ys.push_back(d.sample(i).label);
    }
    auto loss_of = [&](bool step) {
      GradTape<float> tape;
      ForwardOptions fo;
      fo.mode = Mode::train;
      fo.head_dropout = 0.0;
      auto loss = cross_entropy(forward(tape, model, std::span<const Tensor<float>>(xs), fo).logits, std::span<const int>(ys));
      if (step) {
        model.zero_grad();
        tape.backward(loss);
      }
      return loss.value().item();
    };
    Adam<float> adam(model.trainable_parameters(), AdamOptions{.learning_rate = 1e-3});
    const float before = loss_of(true);
    adam.step();
    decreased += loss_of(false) < before;
  }
  EXPECT_GE(decreased, 9);
}

TEST(Train, DeterministicHistoryAndWeights) {
  const Dataset d = make_synthetic_dataset(3, 8, 32, 1);
  const Split s = stratified_split(d.labels(), SplitSpec{.seed = 1});
  auto run = [&] {
    auto model = VitModel<float>::random(toy_config(), 7);
    return train(model, d, s.train, s.val, quick_config(), toy_pipeline());
  };
  auto a = run();
  auto b = run();
  ASSERT_EQ(a.history.epochs.size(), b.history.epochs.size());
  std::ostringstream ha, hb;
  a.history.write_csv(ha, false);
  b.history.write_csv(hb, false);
  EXPECT_EQ(ha.str(), hb.str());
  std::ostringstream wa, wb;
  save_weights(a.best, wa);
  save_weights(b.best, wb);
  EXPECT_EQ(wa.str(), wb.str());
}

TEST(Train, ThreadCountDoesNotChangeResults) {
  const Dataset d = make_synthetic_dataset(3, 8, 32, 2);
  const Split s = stratified_split(d.labels(), SplitSpec{.seed = 2});
  auto run = [&](std::size_t threads) {
    auto model = VitModel<float>::random(toy_config(), 7);
    auto pipe = toy_pipeline();
    pipe.threads = threads;
    return train(model, d, s.train, s.val, quick_config(), pipe);
  };
  auto a = run(1), b = run(4);
  for (std::size_t i = 0; i < a.best.parameters().size(); ++i) EXPECT_EQ(a.best.parameters()[i].value, b.best.parameters()[i].value);
}

TEST(Train, FrozenParametersAreBitwiseUnchanged) {
  VitConfig cfg = toy_config();
  cfg.depth = 4;
  cfg.unfrozen_blocks = 2;
  auto model = VitModel<float>::random(cfg, 3);
  const auto before = model;
  const Dataset d = make_synthetic_dataset(3, 8, 32, 3);
  const Split s = stratified_split(d.labels(), SplitSpec{.seed = 3});
  train(model, d, s.train, s.val, quick_config(), toy_pipeline());
  std::size_t frozen = 0, moved = 0;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    const auto& p = model.parameters()[i];
    if (!p.trainable && !p.buffer) {
      EXPECT_EQ(p.value, before.parameters()[i].value) << p.name;
      ++frozen;
    } else if (p.value != before.parameters()[i].value) {
      ++moved;
    }
  }
  EXPECT_GT(frozen, 0u);
  EXPECT_GT(moved, 0u);
}

TEST(Train, BestModelRetentionAndMonotoneRate) {
  const Dataset d = make_synthetic_dataset(3, 8, 32, 4);
  const Split s = stratified_split(d.labels(), SplitSpec{.seed = 4});
  auto model = VitModel<float>::random(toy_config(), 9);
  TrainConfig cfg = quick_config(4);
  cfg.max_epochs = 12;
  cfg.learning_rate = 1e-2;
  cfg.scheduler_patience = 1;
  auto res = train(model, d, s.train, s.val, cfg, toy_pipeline());
  const auto& h = res.history;
  ASSERT_GE(h.best_epoch, 1u);
  double mx = 0;
  for (const auto& e : h.epochs) mx = std::max(mx, e.val_acc);
  EXPECT_EQ(h.epochs[h.best_epoch - 1].val_acc, mx);
  for (std::size_t i = 0; i + 1 < h.best_epoch; ++i) EXPECT_LT(h.epochs[i].val_acc, mx);
  for (std::size_t i = 1; i < h.epochs.size(); ++i) EXPECT_LE(h.epochs[i].learning_rate, h.epochs[i - 1].learning_rate);
  EvalInputCache<float> cache(d, toy_pipeline());
  const auto [loss, acc] = evaluate_loss_accuracy(std::as_const(res.best), cache, d, s.val, 8);
  EXPECT_EQ(acc, mx);
}

TEST(Train, TrainingReadsOnlyTrainAndValidation) {
  Dataset d = make_synthetic_dataset(3, 8, 32, 5);
  const Split s = stratified_split(d.labels(), SplitSpec{.seed = 5});
  std::set<std::size_t> touched;
  d.set_access_hook([&](std::size_t uid) { touched.insert(uid); });
  auto model = VitModel<float>::random(toy_config(), 9);
  TrainConfig cfg = quick_config();
  cfg.max_epochs = 2;
  train(model, d, s.train, s.val, cfg, toy_pipeline());
  for (std::size_t i : s.test) EXPECT_EQ(touched.count(d.sample(i).uid), 0u);
  EXPECT_EQ(touched.size(), s.train.size() + s.val.size());
}

TEST(Train, NonFiniteLossAborts) {
  const Dataset d = make_synthetic_dataset(3, 8, 32, 6);
  const Split s = stratified_split(d.labels(), SplitSpec{.seed = 6});
  auto model = VitModel<float>::random(toy_config(), 9);
  model.parameter("head.out.bias").value[0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(train(model, d, s.train, s.val, quick_config(), toy_pipeline()), NumericError);
}

TEST(Train, EmptySplitsAreConfigurationErrors) {
  const Dataset d = make_synthetic_dataset(3, 8, 32, 6);
  auto model = VitModel<float>::random(toy_config(), 9);
  const std::vector<std::size_t> some{0, 1, 2}, none;
  EXPECT_THROW(train(model, d, some, none, quick_config(), toy_pipeline()), ConfigError);
  EXPECT_THROW(train(model, d, std::vector<std::size_t>{0}, some, quick_config(), toy_pipeline()), ConfigError);
}

TEST(Train, AugmentedRunIsDeterministic) {
  const Dataset d = make_synthetic_dataset(3, 6, 40, 7);
  const Split s = stratified_split(d.labels(), SplitSpec{.seed = 7});
  auto run = [&] {
    auto model = VitModel<float>::random(toy_config(), 7);
    TrainConfig cfg = quick_config(7);
    cfg.max_epochs = 2;
    cfg.augment = true;
    auto pipe = toy_pipeline();
    pipe.threads = 3;
    return train(model, d, s.train, s.val, cfg, pipe).history;
  };
  std::ostringstream a, b;
  run().write_csv(a, false);
  run().write_csv(b, false);
  EXPECT_EQ(a.str(), b.str());
}

TEST(Train, OverfitsSmallSyntheticSet) {
  const Dataset d = make_synthetic_dataset(3, 20, 32, 11);
  const auto all = range(d.size());
  auto model = VitModel<float>::random(toy_config(), 12);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.max_epochs = 200;
  cfg.augment = false;
  cfg.early_stop_patience = 200;
  cfg.scheduler_patience = 200;
  cfg.seed = 11;
  auto res = train(model, d, all, all, cfg, toy_pipeline());
  EvalInputCache<float> cache(d, toy_pipeline());
  EXPECT_EQ(evaluate_loss_accuracy(std::as_const(res.best), cache, d, all, 16).second, 1.0);
}

TEST(GridSearch, DefaultSpaceHasEightyOneCells) {
  GridSpace space;
  EXPECT_EQ(space.size(), 81u);
  const auto cells = space.cells(TrainConfig{});
  EXPECT_EQ(cells.size(), 81u);
  std::set<std::tuple<double, double, double, std::size_t>> unique;
  for (const auto& c : cells) unique.emplace(c.learning_rate, c.weight_decay, c.dropout, c.batch_size);
  EXPECT_EQ(unique.size(), 81u);
}

TEST(GridSearch, RankingTieBreaks) {
  std::vector<GridCellResult> cells(4);
  cells[0].val_accuracy = 0.9;
  cells[0].config.learning_rate = 1e-2;
  cells[1].val_accuracy = 0.9;
  cells[1].config.learning_rate = 1e-3;
  cells[1].config.weight_decay = 1e-3;
  cells[2].val_accuracy = 0.9;
  cells[2].config.learning_rate = 1e-3;
  cells[2].config.weight_decay = 1e-5;
  cells[3].val_accuracy = 0.95;
  cells[3].config.learning_rate = 1e-2;
  for (std::size_t i = 0; i < 4; ++i) cells[i].cell = i;
  rank_grid(cells);
  EXPECT_EQ(cells[0].cell, 3u);
  EXPECT_EQ(cells[1].cell, 2u);
  EXPECT_EQ(cells[2].cell, 1u);
  EXPECT_EQ(cells[3].cell, 0u);
}

TEST(GridSearch, SmallSpaceHoldoutNeverReadsTest) {
  Dataset d = make_synthetic_dataset(3, 8, 32, 8);
  const Split s = stratified_split(d.labels(), SplitSpec{.seed = 8});
  std::set<std::size_t> touched;
  d.set_access_hook([&](std::size_t uid) { touched.insert(uid); });
  GridSpace space{{1e-3, 1e-2}, {1e-5}, {0.2}, {8}};
  GridOptions opt;
  opt.max_epochs = 2;
  opt.threads = 2;
  auto factory = [] { return VitModel<float>::random(toy_config(), 1); };
  const auto report = grid_search<float>(factory, d, s.train, s.val, space, quick_config(), opt, toy_pipeline());
  ASSERT_EQ(report.ranked.size(), 2u);
  for (const auto& r : report.ranked) EXPECT_LE(r.val_accuracy, report.best().val_accuracy);
  for (std::size_t i : s.test) EXPECT_EQ(touched.count(i), 0u);
}

TEST(GridSearch, SingleCellKFold) {
  Dataset d = make_synthetic_dataset(2, 10, 32, 9);
  const Split s = stratified_split(d.labels(), SplitSpec{.seed = 9});
  std::set<std::size_t> touched;
  d.set_access_hook([&](std::size_t uid) { touched.insert(uid); });
  GridSpace space{{1e-3}, {1e-5}, {0.2}, {4}};
  GridOptions opt;
  opt.folds = 2;
  opt.max_epochs = 1;
  auto factory = [] { return VitModel<float>::random(toy_config(2), 1); };
  const auto report = grid_search<float>(factory, d, s.train, s.val, space, quick_config(), opt, toy_pipeline());
  ASSERT_EQ(report.ranked.size(), 1u);
  EXPECT_EQ(report.best().fold_val_accuracies.size(), 2u);
  EXPECT_EQ(report.best().config.learning_rate, 1e-3);
  for (std::size_t i : s.test) EXPECT_EQ(touched.count(i), 0u);
}

TEST(GridSearch, EmptySpaceIsError) {
  const Dataset d = make_synthetic_dataset(2, 10, 32, 9);
  GridSpace space{{}, {1e-5}, {0.2}, {4}};
  auto factory = [] { return VitModel<float>::random(toy_config(2), 1); };
  EXPECT_THROW(grid_search<float>(factory, d, range(10), range(10), space, quick_config(), GridOptions{}), ConfigError);
}
