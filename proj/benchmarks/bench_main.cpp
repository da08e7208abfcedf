// Microbenchmarks for the hot paths: the flow itself (forward, inverse,
// training tape), both conditional front ends and the loudness meter. All
// audio fixtures are 1 s at 16 kHz unless noted.

#include <benchmark/benchmark.h>

#include <cmath>

#include "flowdenoise/autodiff.hpp"
#include "flowdenoise/features.hpp"
#include "flowdenoise/flow.hpp"
#include "flowdenoise/loudness.hpp"
#include "flowdenoise/rng.hpp"
#include "flowdenoise/train.hpp"

using namespace fdn;

namespace {

audio::Waveform noise_wave(size_t n, int sample_rate, uint64_t seed) {
  Rng rng(seed);
  audio::Waveform w;
  w.sample_rate = sample_rate;
  w.samples.resize(n);
  for (double& s : w.samples) s = 0.3 * rng.normal();
  return w;
}

template <typename T>
flow::FlowModel<T> default_model() {
  flow::FlowConfig cfg;  // 16 blocks, g = 12, single coupling, time cond
  flow::FlowModel<T> m(cfg);
  m.randomize_parameters(1);
  return m;
}

flow::FlowConfig small_config() {
  flow::FlowConfig cfg;
  cfg.n_blocks = 4;
  cfg.g = 8;
  cfg.mode = flow::CouplingMode::kDouble;
  cfg.hidden_channels = 32;
  cfg.n_layers = 4;
  cfg.cond_channels = 16;
  return cfg;
}

void bm_flow_forward(benchmark::State& state) {
  const auto m = default_model<float>();
  const audio::Waveform x = noise_wave(16008, 16000, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(flow::flow_forward(m, x, x).total_logdet);
  }
}
BENCHMARK(bm_flow_forward)->Unit(benchmark::kMillisecond);

void bm_flow_inverse(benchmark::State& state) {
  const auto m = default_model<float>();
  const audio::Waveform x = noise_wave(16008, 16000, 3);
  const auto fwd = flow::flow_forward(m, x, x);
  for (auto _ : state) {
    benchmark::DoNotOptimize(flow::flow_inverse(m, fwd.z, x).samples[0]);
  }
}
BENCHMARK(bm_flow_inverse)->Unit(benchmark::kMillisecond);

// One optimizer step on the toy-scale model: tape build, backward, Adam.
void bm_train_step(benchmark::State& state) {
  flow::FlowModel<double> m(small_config());
  m.randomize_parameters(4);
  const audio::Waveform x = noise_wave(8000, 16000, 5);
  train::OptimState<double> opt;
  for (auto _ : state) {
    ad::Tape<double> tape;
    const auto fwd = flow::flow_forward_tape(m, tape, x, x, 1.0);
    tape.backward(fwd.nll);
    std::vector<Tensor<double>> grads;
    grads.reserve(fwd.params.size());
    for (const ad::Var& p : fwd.params) grads.push_back(tape.grad(p));
    train::adam_step(opt, m, grads);
    benchmark::DoNotOptimize(tape.value(fwd.nll).item());
  }
}
BENCHMARK(bm_train_step)->Unit(benchmark::kMillisecond);

void bm_mel_spectrogram(benchmark::State& state) {
  const feat::MelConfig cfg;
  const audio::Waveform x = noise_wave(16000, 16000, 6);
  for (auto _ : state) {
    benchmark::DoNotOptimize(feat::mel_spectrogram(cfg, x).data(0, 0));
  }
}
BENCHMARK(bm_mel_spectrogram)->Unit(benchmark::kMillisecond);

void bm_apg_analyze(benchmark::State& state) {
  const feat::ApgFilterbank fb = feat::design_apg(feat::ApgConfig{}, 16000);
  const audio::Waveform x = noise_wave(16000, 16000, 7);
  for (auto _ : state) {
    benchmark::DoNotOptimize(feat::apg_analyze(fb, x).data(0, 0));
  }
}
BENCHMARK(bm_apg_analyze)->Unit(benchmark::kMillisecond);

void bm_integrated_loudness(benchmark::State& state) {
  audio::Waveform x = noise_wave(3 * 48000, 48000, 8);
  for (double& s : x.samples) s *= 0.5;
  for (auto _ : state) {
    benchmark::DoNotOptimize(loudness::integrated_loudness(x, true).lufs);
  }
}
BENCHMARK(bm_integrated_loudness)->Unit(benchmark::kMillisecond);

void bm_enhance_small(benchmark::State& state) {
  flow::FlowModel<float> m(small_config());
  m.randomize_parameters(9);
  const audio::Waveform noisy = noise_wave(16000, 16000, 10);
  uint64_t seed = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        train::enhance(m, noisy, 0.9, seed++).samples[0]);
  }
}
BENCHMARK(bm_enhance_small)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
