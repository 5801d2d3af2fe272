// Trains the toy ViT on an in-memory synthetic set and reports test metrics.
//
//   train_toy [out_dir]
//
// Writes toy.hvwt and attention.png to out_dir (default: current directory).

#include <iostream>

#include "histovit/histovit.hpp"

using namespace histovit;

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : ".";
  try {
    std::filesystem::create_directories(out);
    const SeedStreams seeds = set_global_seed(7);
    const Dataset data = make_synthetic_dataset(3, 30, 40, seeds.global);
    const Split split = stratified_split(data.labels(), SplitSpec{.seed = seeds.split});

    VitConfig cfg = VitConfig::toy(data.num_classes());
    auto model = VitModel<float>::random(cfg, seeds.init);

    TrainConfig tc;
    tc.learning_rate = 1e-3;
    tc.batch_size = 8;
    tc.max_epochs = 20;
    tc.seed = seeds.global;
    InputPipeline pipe;
    pipe.preprocess = PreprocessOptions::for_image_size(cfg.image_size);

    const auto result = train(model, data, split.train, split.val, tc, pipe, [](const EpochCallbackInfo& e) {
      std::cout << "epoch " << e.record.epoch << "  train_loss " << e.record.train_loss << "  val_acc " << e.record.val_acc
                << "\n";
    });
    std::cout << "best epoch " << result.history.best_epoch << "\n";

    const auto eval = evaluate_model(result.best, data, split.test, pipe, true,
                                     BootstrapOptions{.resamples = 200, .seed = seeds.bootstrap});
    std::cout << eval.report.to_json().dump(2) << "\n";

    save_weights(result.best, out / "toy.hvwt");
    const auto e = explain(result.best, data.image(split.test.front()), pipe.preprocess);
    write_png(out / "attention.png", render_overlay(e.view, e.heatmap, 0.5));
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
