#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "flowdenoise/audio.hpp"
#include "flowdenoise/features.hpp"
#include "flowdenoise/rng.hpp"
#include "flowdenoise/tensor.hpp"

namespace testutil {

// Fresh empty directory under the process working directory; wiped first so
// reruns start clean.
std::filesystem::path scratch_dir(const std::string& name);

fdn::audio::Waveform sine(double freq_hz, double duration_s, int sample_rate,
                          double amplitude = 1.0, double phase = 0.0);

fdn::audio::Waveform white_noise(double duration_s, int sample_rate,
                                 double amplitude, uint64_t seed);

// Speech-like toy signal: a few decaying harmonics with an on/off envelope,
// deterministic in the seed.
fdn::audio::Waveform toy_speech(double duration_s, int sample_rate,
                                uint64_t seed);

struct ToyDataset {
  std::filesystem::path manifest;
  std::vector<std::filesystem::path> clean;
  std::vector<std::filesystem::path> noise;
};

// n_items clean/noise WAV pairs plus a tab-separated manifest with SNRs
// cycling through {0, 5, 10} dB.
ToyDataset make_toy_dataset(const std::filesystem::path& dir, int n_items,
                            double duration_s, int sample_rate, uint64_t seed);

// Brute-force Mel oracle: O(N^2) DFT per frame and independently constructed
// HTK triangles. Mirrors the production contract, shares no code with it.
fdn::Tensor<double> mel_oracle(const fdn::feat::MelConfig& cfg,
                               const fdn::audio::Waveform& w);

double max_abs_diff(const fdn::Tensor<double>& a, const fdn::Tensor<double>& b);

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b);

double max_rel_diff(const fdn::Tensor<double>& a, const fdn::Tensor<double>& b,
                    double floor = 1e-12);

}  // namespace testutil
