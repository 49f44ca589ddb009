#include <benchmark/benchmark.h>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "normshift/augment.hpp"
#include "normshift/model.hpp"
#include "normshift/rng.hpp"

using namespace normshift;

namespace {

Tensor<float> random_batch(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(uniform01(rng));
  return t;
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto cin = static_cast<std::size_t>(state.range(1));
  const auto hw = static_cast<std::size_t>(state.range(2));
  const auto x = random_batch(Shape{n, cin, hw, hw}, 1);
  Param<float> w("w", random_batch(Shape{2 * cin, cin, 3, 3}, 2)), b("b", Tensor<float>(Shape{2 * cin}));
  for (auto _ : state) {
    Tape<float> tape;
    auto y = sum(conv2d(tape.input(x), tape.param(w), tape.param(b), 1, 1));
    tape.backward(y);
    benchmark::DoNotOptimize(w.grad.ptr());
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({32, 3, 24})->Args({32, 16, 12})->Unit(benchmark::kMicrosecond);

void BM_NormForwardBackward(benchmark::State& state) {
  const auto kind = static_cast<NormKind>(state.range(0));
  const auto x = random_batch(Shape{32, 32, 12, 12}, 3);
  auto layer = init_norm<float>(kind, 32, NormConfig{}, 7);
  for (auto _ : state) {
    Tape<float> tape;
    auto y = sum(layer.forward(tape.input(x), Mode::Train));
    tape.backward(y);
    benchmark::DoNotOptimize(tape.size());
  }
  state.SetLabel(std::string(norm_kind_name(kind)));
}
BENCHMARK(BM_NormForwardBackward)
    ->Arg(static_cast<int>(NormKind::BN))
    ->Arg(static_cast<int>(NormKind::GN))
    ->Arg(static_cast<int>(NormKind::SN))
    ->Arg(static_cast<int>(NormKind::ASR))
    ->Unit(benchmark::kMicrosecond);

void BM_TrainStep(benchmark::State& state) {
  ModelConfig cfg;
  cfg.norm.kind = static_cast<NormKind>(state.range(0));
  Model<float> model(cfg);
  const auto x = random_batch(Shape{32, 3, 24, 24}, 4);
  std::vector<std::int32_t> y(32);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<std::int32_t>(i % 10);
  for (auto _ : state) {
    Tape<float> tape;
    auto out = model.forward(tape, tape.constant(x), Mode::Train);
    tape.backward(softmax_cross_entropy(out.logits, y).loss);
    model.zero_grad();
  }
  state.SetLabel(std::string(norm_kind_name(cfg.norm.kind)));
}
BENCHMARK(BM_TrainStep)->Arg(static_cast<int>(NormKind::BN))->Arg(static_cast<int>(NormKind::ASR))->Unit(benchmark::kMillisecond);

void BM_AdaMaximize(benchmark::State& state) {
  ModelConfig cfg;
  cfg.norm.kind = NormKind::ASR;
  Model<float> model(cfg);
  const auto x = random_batch(Shape{256, 3, 24, 24}, 5);
  std::vector<std::int32_t> y(256);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<std::int32_t>(i % 10);
  AdaConfig ada;
  ada.inner_steps = static_cast<std::size_t>(state.range(0));
  ada.chunk = static_cast<std::size_t>(state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(ada_maximize(model, x, y, ada).images.ptr());
}
BENCHMARK(BM_AdaMaximize)->Args({5, 32})->Args({5, 64})->Args({5, 256})->Unit(benchmark::kMillisecond);

}  // namespace
int main(int argc, char** argv) {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
