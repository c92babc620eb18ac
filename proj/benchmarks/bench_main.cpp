#include <benchmark/benchmark.h>

#include <random>

#include "gsgcn/autodiff.hpp"
#include "gsgcn/graph.hpp"
#include "gsgcn/model.hpp"
#include "gsgcn/training.hpp"

using namespace gsgcn;

namespace {

Tensor random_tensor(Shape shape, std::mt19937& rng, real lo = real(-1), real hi = real(1)) {
  return Tensor::uniform(std::move(shape), lo, hi, rng);
}

void bm_matmul(benchmark::State& state) {
  const int m = static_cast<int>(state.range(0));
  const int k = static_cast<int>(state.range(1));
  const int n = static_cast<int>(state.range(2));
  std::mt19937 rng(1);
  Var a(random_tensor({m, k}, rng));
  Var b(random_tensor({k, n}, rng));
  for (auto _ : state) {
    benchmark::DoNotOptimize(matmul(a, b).value().data());
  }
  state.SetItemsProcessed(state.iterations() * 2ll * m * k * n);
}
BENCHMARK(bm_matmul)->Args({96, 576, 896})->Args({128, 128, 448})->Args({14, 14, 64});

void bm_adjacency_build(benchmark::State& state) {
  SkeletonGraph g = build_skeleton_graph("crowdpose14");
  for (auto _ : state) {
    benchmark::DoNotOptimize(build_adjacency_set(g, 8, {3, 5}));
  }
}
BENCHMARK(bm_adjacency_build);

struct ForwardFixture {
  ModelConfig cfg;
  GsGcnModel model;
  Tensor input;
  std::vector<Tensor> distances;
  std::vector<std::uint8_t> present;

  explicit ForwardFixture(ModelConfig c) : cfg(std::move(c)), model(cfg, 3) {
    std::mt19937 rng(4);
    const int k = model.graph().num_joints;
    input = random_tensor({cfg.group_size, cfg.in_channels, cfg.window_length, k}, rng,
                          real(-0.5), real(0.5));
    for (int i = 1; i < cfg.group_size; ++i) {
      distances.push_back(random_tensor({1, cfg.window_length / 2, k}, rng, 0, real(1.5)));
    }
    present.assign(static_cast<size_t>(cfg.group_size), 1);
  }
};

void bm_forward_micro(benchmark::State& state) {
  ForwardFixture f(ModelConfig::micro());
  for (auto _ : state) {
    benchmark::DoNotOptimize(f.model.predict(f.input, f.distances, f.present));
  }
}
BENCHMARK(bm_forward_micro);

void bm_forward_default(benchmark::State& state) {
  ForwardFixture f(ModelConfig::defaults());
  for (auto _ : state) {
    benchmark::DoNotOptimize(f.model.predict(f.input, f.distances, f.present));
  }
}
BENCHMARK(bm_forward_default)->Unit(benchmark::kMillisecond);

void bm_train_step_default(benchmark::State& state) {
  ForwardFixture f(ModelConfig::defaults());
  for (auto _ : state) {
    ForwardCtx ctx;
    ctx.mode = BnMode::train;
    Var logits = f.model.forward(f.input, f.distances, f.present, ctx);
    Var loss = focal_loss(softmax(logits, 0), 2, real(2));
    GradMap grads = backward(loss);
    benchmark::DoNotOptimize(grads.size());
  }
}
BENCHMARK(bm_train_step_default)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
