// Optimized (im2col + GEMM, OpenMP) conv kernels against the serial reference,
// and a serial vs parallel batch gradient.
#include <benchmark/benchmark.h>

#include <algorithm>
#include <vector>

#include "hetmt/kernels.hpp"
#include "hetmt/model.hpp"
#include "hetmt/rng.hpp"
#include "hetmt/trainer.hpp"

namespace {

using namespace hetmt;

kernels::ConvGeometry geometry(const benchmark::State& st) {
  const int c = static_cast<int>(st.range(0));
  return {c, c, 3, static_cast<int>(st.range(1)), 32, 32};
}

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

void set_counters(benchmark::State& st, const kernels::ConvGeometry& g, double passes) {
  st.counters["MAC/s"] = benchmark::Counter(passes * static_cast<double>(g.weight_size() * g.pixels()),
                                            benchmark::Counter::kIsIterationInvariantRate);
}

void BM_ForwardReference(benchmark::State& st) {
  const auto g = geometry(st);
  const auto in = random_vec(g.input_size(), 1), w = random_vec(g.weight_size(), 2), b = random_vec(g.out_channels, 3);
  std::vector<float> out(g.output_size());
  for (auto _ : st) {
    kernels::reference::conv2d_forward<float>(g, in, w, b, out);
    benchmark::DoNotOptimize(out.data());
  }
  set_counters(st, g, 1);
}

void BM_ForwardOptimized(benchmark::State& st) {
  const auto g = geometry(st);
  const auto in = random_vec(g.input_size(), 1), w = random_vec(g.weight_size(), 2), b = random_vec(g.out_channels, 3);
  std::vector<float> out(g.output_size()), scratch;
  for (auto _ : st) {
    kernels::conv2d_forward<float>(g, in, w, b, out, scratch);
    benchmark::DoNotOptimize(out.data());
  }
  set_counters(st, g, 1);
}

void BM_BackwardReference(benchmark::State& st) {
  const auto g = geometry(st);
  const auto in = random_vec(g.input_size(), 1), w = random_vec(g.weight_size(), 2);
  const auto go = random_vec(g.output_size(), 3);
  std::vector<float> gi(g.input_size()), gw(g.weight_size()), gb(g.out_channels);
  for (auto _ : st) {
    kernels::reference::conv2d_backward<float>(g, in, w, go, gi, gw, gb);
    benchmark::DoNotOptimize(gi.data());
  }
  set_counters(st, g, 2);
}

void BM_BackwardOptimized(benchmark::State& st) {
  const auto g = geometry(st);
  const auto in = random_vec(g.input_size(), 1), w = random_vec(g.weight_size(), 2);
  const auto go = random_vec(g.output_size(), 3);
  std::vector<float> gi(g.input_size()), gw(g.weight_size()), gb(g.out_channels), scratch;
  for (auto _ : st) {
    kernels::conv2d_backward<float>(g, in, w, go, gi, gw, gb, scratch);
    benchmark::DoNotOptimize(gi.data());
  }
  set_counters(st, g, 2);
}

#define CONV_ARGS ArgsProduct({{16, 32, 64}, {1, 4}})
BENCHMARK(BM_ForwardReference)->CONV_ARGS;
BENCHMARK(BM_ForwardOptimized)->CONV_ARGS;
BENCHMARK(BM_BackwardReference)->CONV_ARGS;
BENCHMARK(BM_BackwardOptimized)->CONV_ARGS;

// Full training step on a batch of 8 patches of 32x32 for M4; arguments are
// the thread cap (1 = serial) and a divisor applied to every layer width.
void BM_TrainStep(benchmark::State& st) {
  ModelConfig mc;
  const int div = static_cast<int>(st.range(1));
  for (int& f : mc.trunk_features) f = std::max(1, f / div);
  for (int& f : mc.branch_widths) f = std::max(1, f / div);
  Network<float> net(mc);
  TrainConfig tc;
  TrainState state = init_train_state(net, 7);
  TrainingSet data;
  data.cases.push_back({"c", 1, 64, 64, random_vec(64 * 64, 4), random_vec(64 * 64, 5),
                        std::vector<std::uint8_t>(64 * 64, 1)});
  Rng rng(9);
  const PatchBatch batch = sample_patch_batch(data, tc, rng);
  setenv("HETMT_THREADS", std::to_string(st.range(0)).c_str(), 1);
  for (auto _ : st) benchmark::DoNotOptimize(train_step(net, state, batch, tc).total);
  unsetenv("HETMT_THREADS");
}
BENCHMARK(BM_TrainStep)->ArgsProduct({{1, 4}, {1, 2}})->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
