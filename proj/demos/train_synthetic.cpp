// Minimal end-to-end use of the library: generate synthetic vibration
// windows, train a small TSViT for a few epochs and report test accuracy.

#include <cstdio>

#include "tsvit/tsvit.hpp"

int main() {
  using namespace tsvit;

  tune_allocator();
  Dataset data = gen_synthetic(/*n_per_class=*/100, /*length=*/512, /*seed=*/7);
  auto [train, test] = split(data, SplitSpec{0.8, 7});

  TsvitConfig cfg;
  cfg.signal_length = 512;
  cfg.patch_length = 32;
  cfg.embed_dim = 32;
  cfg.heads = 4;
  cfg.blocks = 2;
  cfg.mlp_dim = 64;
  cfg.num_classes = 4;

  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.epochs = 5;

  Rng rng(tc.seed);
  auto model = init_model<float>(cfg, rng);
  auto adam = AdamState<float>::for_model(model);
  std::printf("parameters: %llu\n", static_cast<unsigned long long>(count_params(cfg)));
  for (std::uint32_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    auto stats = train_epoch(model, adam, train, tc, rng);
    auto ev = evaluate(model, test);
    std::printf("epoch %u  train loss %.4f  test acc %.4f\n", epoch, stats.loss, ev.accuracy);
  }
  return 0;
}
