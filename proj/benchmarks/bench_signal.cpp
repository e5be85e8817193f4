#include <benchmark/benchmark.h>

#include "seqa/rng.hpp"
#include "seqa/signal.hpp"

using namespace seqa;
using namespace seqa::signal;

namespace {
Waveform make_noise(std::size_t n) {
  Rng rng(1234);
  std::vector<double> s(n);
  for (auto& x : s) x = rng.uniform(-0.5, 0.5);
  return Waveform(std::move(s), 16000);
}
}  // namespace

static void BM_Stft(benchmark::State& state) {
  const Waveform w = make_noise(16000);
  const StftConfig c{};
  for (auto _ : state) {
    Spectrogram s = stft(w, c);
    benchmark::DoNotOptimize(s.data.data());
  }
}
BENCHMARK(BM_Stft);

static void BM_StftIstftRoundtrip(benchmark::State& state) {
  const Waveform w = make_noise(16000);
  const StftConfig c{};
  for (auto _ : state) {
    Waveform r = istft(stft(w, c));
    benchmark::DoNotOptimize(r.samples.data());
  }
}
BENCHMARK(BM_StftIstftRoundtrip);

static void BM_LogMel(benchmark::State& state) {
  const Waveform w = make_noise(16000);
  const Spectrogram s = stft(w, StftConfig{});
  const MelBank b = melbank(16000, 512, 64, 0.0, 8000.0);
  for (auto _ : state) {
    Tensor t = log_mel(s, b, 1e-10);
    benchmark::DoNotOptimize(t.data.data());
  }
}
BENCHMARK(BM_LogMel);

BENCHMARK_MAIN();
