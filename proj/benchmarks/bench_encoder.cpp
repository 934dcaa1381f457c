// Microbenchmarks for the encoder hot paths: no-grad embedding extraction and
// a full forward/backward training step, per preset and batch size.

#include <benchmark/benchmark.h>

#include <vector>

#include "osf/encoder.hpp"
#include "osf/nn/optim.hpp"
#include "osf/rng.hpp"

namespace {

osf::Epoch random_epoch(osf::Rng& rng) {
  osf::Epoch e;
  e.values = osf::EpochMatrix(osf::kNumChannels, osf::kEpochSamples);
  for (int c = 0; c < osf::kNumChannels; ++c)
    for (int j = 0; j < osf::kEpochSamples; ++j)
      e.values(c, j) = static_cast<float>(rng.normal(0.0, 0.5));
  e.channel_valid.fill(true);
  return e;
}

void bench_encode(benchmark::State& state, const std::string& preset) {
  const int batch = static_cast<int>(state.range(0));
  auto enc = osf::Encoder<float>::init(osf::EncoderConfig::from_preset(preset), 1);
  osf::Rng rng(2);
  std::vector<osf::Epoch> epochs;
  for (int i = 0; i < batch; ++i) epochs.push_back(random_epoch(rng));
  std::vector<const osf::Epoch*> ptrs;
  for (const auto& e : epochs) ptrs.push_back(&e);
  for (auto _ : state) benchmark::DoNotOptimize(enc.encode(ptrs));
  state.SetItemsProcessed(state.iterations() * batch);
}

void bench_train_step(benchmark::State& state, const std::string& preset) {
  const int batch = static_cast<int>(state.range(0));
  auto cfg = osf::EncoderConfig::from_preset(preset);
  auto enc = osf::Encoder<float>::init(cfg, 1);
  osf::Rng rng(3);
  osf::nn::Mat<float> windows(static_cast<long>(batch) * cfg.signal_tokens(), cfg.token_window);
  for (long i = 0; i < windows.rows(); ++i)
    for (long j = 0; j < windows.cols(); ++j) windows(i, j) = static_cast<float>(rng.normal());
  auto params = enc.weights.all();
  for (auto _ : state) {
    osf::nn::zero_grads(params);
    osf::nn::Tape<float> tape;
    auto cls = enc.forward_cls(tape, windows, batch);
    tape.backward(osf::nn::sum_all(osf::nn::mul(cls, cls)));
    benchmark::DoNotOptimize(params.front()->grad.sum());
  }
  state.SetItemsProcessed(state.iterations() * batch);
}

}  // namespace

BENCHMARK_CAPTURE(bench_encode, tiny, "tiny")->Arg(1)->Arg(4)->Arg(16)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(bench_encode, vit_1m, "vit-1m")->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(bench_train_step, tiny, "tiny")->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(bench_train_step, vit_1m, "vit-1m")->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
