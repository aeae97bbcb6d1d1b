#include <benchmark/benchmark.h>

#include <cmath>

#include "ntkcl/ahps.hpp"
#include "ntkcl/gaps.hpp"
#include "ntkcl/harness.hpp"
#include "ntkcl/ntk.hpp"
#include "ntkcl/regime.hpp"
#include "ntkcl/rng.hpp"

namespace ntkcl {
namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  CounterRng rng(seed);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.normal();
  return m;
}

SpectralModel power_law(std::size_t modes) {
  SpectralModel s;
  for (std::size_t r = 1; r <= modes; ++r) {
    s.eigenvalues.push_back(std::pow(static_cast<double>(r), -2.0));
    s.weights.push_back(1.0);
  }
  return s;
}

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.backbone.width = 16;
  c.backbone.blocks = 1;
  c.backbone.heads = 2;
  c.backbone.patches = 4;
  c.adapters.prompts = 2;
  c.adapters.rank = 2;
  c.adapters.fusion_heads = 2;
  c.pretrain.classes = 4;
  c.pretrain.per_class = 12;
  c.pretrain.epochs = 3;
  c.stream.classes = 4;
  c.stream.tasks = 2;
  c.stream.per_class = 20;
  c.stream.patches = 4;
  c.stream.width = 16;
  c.train.epochs = 1;
  return c;
}

void BM_NtkGramLinear(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto model = LinearModel::from_weights(gaussian(4, 32, 1));
  const Matrix x = gaussian(n, 32, 2);
  for (auto _ : state) benchmark::DoNotOptimize(ntk_gram(model, x));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_NtkGramLinear)->RangeMultiplier(2)->Range(8, 64)->Complexity();

void BM_NtkGramAdapters(benchmark::State& state) {
  const auto c = small_config();
  const AdapterNtkModel model(ToyBackbone::random_init(c.backbone),
                              AdapterBank::initialize(c.backbone, c.adapters));
  const Matrix x = gaussian(static_cast<std::size_t>(state.range(0)), model.input_dim(), 3);
  for (auto _ : state) benchmark::DoNotOptimize(ntk_gram(model, x));
}
BENCHMARK(BM_NtkGramAdapters)->Arg(4)->Arg(16);

void BM_FitTaskRbf(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix x = gaussian(n, 16, 4);
  const Matrix y = gaussian(n, 10, 5);
  for (auto _ : state) benchmark::DoNotOptimize(fit_task(RegimeState(10), x, y, Kernel::rbf(0.1), 1e-3));
  state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_FitTaskRbf)->RangeMultiplier(2)->Range(32, 512)->Complexity();

void BM_SolveSelfConsistent(benchmark::State& state) {
  const SpectralModel s = power_law(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(task_specific_gap(s, 32.0, 1e-2));
}
BENCHMARK(BM_SolveSelfConsistent)->Arg(16)->Arg(256);

void BM_MonteCarloGap(benchmark::State& state) {
  const SpectralModel s = power_law(32);
  for (auto _ : state) benchmark::DoNotOptimize(monte_carlo_gap(s, 32, 1e-2, 100, 7));
}
BENCHMARK(BM_MonteCarloGap);

void BM_TripleTraceBackward(benchmark::State& state) {
  const auto c = small_config();
  const ToyBackbone net = ToyBackbone::random_init(c.backbone);
  const AdapterBank bank = AdapterBank::initialize(c.backbone, c.adapters);
  const TokenSequence x = gaussian(c.backbone.tokens(), c.backbone.width, 8);
  const std::vector<double> d_branch(2 * c.backbone.width, 0.0);
  const std::vector<double> d_hybrid(2 * c.backbone.width, 1.0);
  for (auto _ : state) {
    const TripleTrace t = triple_trace(net, bank, x);
    BankGradient g = BankGradient::zeros_like(bank);
    triple_backward(net, bank, t, d_branch, d_branch, d_hybrid, {&g});
    benchmark::DoNotOptimize(g);
  }
}
BENCHMARK(BM_TripleTraceBackward);

void BM_TrainTaskEpoch(benchmark::State& state) {
  const auto c = small_config();
  const ToyBackbone net = ToyBackbone::random_init(c.backbone);
  const TaskStream st = synth_stream(c.stream);
  for (auto _ : state) {
    Learner l = Learner::create(net, c.adapters, c.stream.classes);
    TaskDataVault v(st);
    benchmark::DoNotOptimize(train_task(l, v, 1, {c.weights, c.train.temperature}, c.train, 0));
  }
}
BENCHMARK(BM_TrainTaskEpoch)->Unit(benchmark::kMillisecond);

void BM_GpSearch(benchmark::State& state) {
  const SearchBox box;
  const Objective3 f = [](const Point3& p) { return (p[0] - 0.1) * (p[0] - 0.1) + p[1] + p[2]; };
  SearchOptions o;
  o.n_calls = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(gp_search(f, box, o));
}
BENCHMARK(BM_GpSearch)->Arg(10)->Arg(30)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace ntkcl

BENCHMARK_MAIN();
