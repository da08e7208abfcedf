#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "flowdenoise/errors.hpp"

namespace fdn::audio {

// Mono audio in [-1, 1] nominal range, full scale = 1.0.
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  size_t length() const { return samples.size(); }
  double duration_s() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
};

struct SnrSpec {
  double snr_db = 0.0;
};

enum class WavEncoding { kPcm16, kFloat32 };

// Reads a RIFF/WAVE file (PCM16 or IEEE float32). Multichannel input is
// downmixed to mono by averaging; PCM16 samples are scaled by 1/32768.
Waveform read_wav(const std::filesystem::path& path);

// Writes mono WAV. Float32 round-trips bit exactly; PCM16 rounds to the
// nearest step and clips values outside [-1, 1].
void write_wav(const std::filesystem::path& path, const Waveform& w,
               WavEncoding encoding);

struct MixResult {
  Waveform mixture;
  Waveform scaled_noise;
};

// Scales `noise` so that 10*log10(P_clean / P_noise) equals spec.snr_db and
// returns mixture = clean + scaled noise.
MixResult mix_at_snr(const Waveform& clean, const Waveform& noise, SnrSpec spec);

// Contiguous random slice of duration_s. The offset is drawn uniformly from
// the valid range with the seeded generator; signals shorter than the
// requested duration are zero-extended instead of rejected.
Waveform chunk_random(const Waveform& w, double duration_s, uint64_t rng_seed);

struct PaddedWaveform {
  Waveform padded;
  int pad_len = 0;
};

// Appends pad_len in [0, g-1] zeros so the length is divisible by g.
PaddedWaveform pad_to_multiple(const Waveform& w, int g);

// Mean power (mean of squared samples).
double mean_power(const Waveform& w);

// One training/validation item: paths plus the mixing SNR.
struct ManifestItem {
  std::string clean_path;
  std::string noise_path;
  double snr_db = 0.0;
};

// Tab-separated manifest, one `<clean>\t<noise>\t<snr_db>` line per item.
std::vector<ManifestItem> read_manifest(const std::filesystem::path& path);

}  // namespace fdn::audio
