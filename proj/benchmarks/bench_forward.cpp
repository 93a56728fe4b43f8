#include <benchmark/benchmark.h>

#include <random>

#include "yieldnet/model.hpp"

using namespace yieldnet;

namespace {

ModelConfig desk_config(int64_t size) {
  ModelConfig m;
  m.input = {5, 6, size, size};
  m.validate();
  return m;
}

Tensor<float> random_input(const ModelConfig& m, int64_t b) {
  Tensor<float> x({b, m.input.t, m.input.c, m.input.h, m.input.w});
  std::mt19937_64 rng(1);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  for (auto& v : x.data) v = nd(rng);
  return x;
}

void forward_once(YieldModel<float>& model, const Tensor<float>& x, bool training) {
  Graph<float> g;
  std::mt19937_64 rng(0);
  auto fw = model.forward(g, x, training, false, rng);
  benchmark::DoNotOptimize(g.val(fw.main_pred).ptr());
}

void BM_forward_eval(benchmark::State& state) {
  ModelConfig m = desk_config(state.range(0));
  YieldModel<float> model(m);
  model.init(1);
  auto x = random_input(m, state.range(1));
  for (auto _ : state) forward_once(model, x, false);
  state.SetItemsProcessed(state.iterations() * state.range(1));
}
BENCHMARK(BM_forward_eval)
    ->Args({96, 1})
    ->Args({96, 8})
    ->Args({224, 1})
    ->Unit(benchmark::kMillisecond);

void BM_train_step(benchmark::State& state) {
  ModelConfig m = desk_config(state.range(0));
  YieldModel<float> model(m);
  model.init(1);
  auto x = random_input(m, state.range(1));
  Tensor<float> target({state.range(1), 1, m.input.h, m.input.w});
  std::mt19937_64 rng(0);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  for (auto& v : target.data) v = nd(rng);
  for (auto _ : state) {
    Graph<float> g;
    std::mt19937_64 drng(0);
    auto fw = model.forward(g, x, true, false, drng);
    int loss = g.add_scaled(g.mse_loss(fw.main_pred, target),
                            g.mse_loss(fw.aux_pred, target), 0.2f);
    g.backward(loss);
    benchmark::DoNotOptimize(g.grad(fw.param_nodes[0]).ptr());
  }
  state.SetItemsProcessed(state.iterations() * state.range(1));
}
BENCHMARK(BM_train_step)->Args({96, 8})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
