#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "flowdenoise/audio.hpp"
#include "flowdenoise/tensor.hpp"

namespace fdn::feat {

enum class FeatureKind : uint8_t { kTime = 0, kMel = 1, kApg = 2 };

// Conditional representation of a signal: C channels by T frames.
struct FeatureMap {
  Tensor<double> data;
  double frame_rate = 0.0;  // frames per second
  FeatureKind kind = FeatureKind::kTime;

  int channels() const { return data.rows(); }
  int frames() const { return data.cols(); }
};

// Traunmueller Bark mapping and its closed-form inverse.
double bark_from_hz(double f_hz);
double hz_from_bark(double bark);

// Zwicker critical bandwidth: 25 + 75*(1 + 1.4*(f/1000)^2)^0.69.
double critical_bandwidth_hz(double f_hz);

// ---------------------------------------------------------------------------
// Mel spectrogram front end

enum class Window : uint8_t { kHann = 0 };

struct MelConfig {
  int fft_size = 512;
  Window window = Window::kHann;
  double overlap = 0.75;  // fraction of fft_size shared between frames
  int n_bands = 80;
  double fmin_hz = 0.0;
  double fmax_hz = 0.0;  // 0 means Nyquist
};

int mel_hop(const MelConfig& cfg);
// Frames for an input of n samples: 1 + floor((n - fft_size) / hop).
int mel_frame_count(const MelConfig& cfg, size_t n_samples);

// Hann-windowed magnitude STFT multiplied by triangular weights placed
// uniformly on the HTK Mel scale. Frame t covers samples
// [t*hop, t*hop + fft_size); no centering or padding.
FeatureMap mel_spectrogram(const MelConfig& cfg, const audio::Waveform& w);

// ---------------------------------------------------------------------------
// All-pole gammatone filterbank front end

struct ApgConfig {
  int n_bands = 80;
  double fmin_hz = 40.0;
  int order = 4;           // identical first-order complex stages per band
  double lookahead = 0.7;  // fraction of the envelope-peak delay to advance
  double bandwidth_scale = 1.0;  // multiplier on the Bark critical bandwidth
};

struct ApgBand {
  double center_freq_hz = 0.0;
  std::complex<double> pole;    // magnitude < 1
  double per_stage_gain = 0.0;  // normalizes the cascade peak response to 1
  int delay_comp = 0;           // samples the band output is advanced by
};

struct ApgFilterbank {
  std::vector<ApgBand> bands;
  int order = 4;
  int sample_rate = 16000;

  int n_bands() const { return static_cast<int>(bands.size()); }
};

// Places n_bands centers uniformly on the Bark scale between fmin and
// 0.98*Nyquist and derives pole radius, gain and delay compensation per band.
ApgFilterbank design_apg(const ApgConfig& cfg, int sample_rate);

// Runs every band's complex one-pole cascade over the input, takes per-sample
// magnitudes and advances each band by its delay compensation (zero tail).
// Output is n_bands x N at the input sample rate.
FeatureMap apg_analyze(const ApgFilterbank& fb, const audio::Waveform& w);

// Raw complex cascade output of one band, without delay compensation.
std::vector<std::complex<double>> apg_run_band(const ApgFilterbank& fb, int band,
                                               const std::vector<double>& x);

// Steady-state magnitude response of one band at f_hz, evaluated from the
// designed coefficients.
double apg_response_at(const ApgFilterbank& fb, int band, double f_hz);

// |h[n]| of one band's impulse response for n in [0, length).
std::vector<double> apg_impulse_envelope(const ApgFilterbank& fb, int band,
                                         int length);

// Identity representation: 1 x N at the sample rate.
FeatureMap time_features(const audio::Waveform& w);

// ---------------------------------------------------------------------------
// Learned upsampling of frame-rate features to sample rate

struct UpsamplerParams {
  Tensor<double> kernel;  // C x (2*stride)
  Tensor<double> bias;    // 1 x C
  int stride = 128;
};

// Kernel that repeats each frame `stride` times (a hold interpolator).
UpsamplerParams nearest_neighbor_upsampler(int channels, int stride);

// Single transposed convolution with the given parameters; output is cropped
// or zero-extended to exactly target_len columns.
FeatureMap upsample_features(const FeatureMap& fm, size_t target_len,
                             const UpsamplerParams& params);

// ---------------------------------------------------------------------------
// Feature dump container ("FDFM"): magic, u32 version, u32 C, u64 T,
// f64 frame_rate, u8 kind, then C*T little-endian f32 values row-major.

void write_fdfm(const std::filesystem::path& path, const FeatureMap& fm);
FeatureMap read_fdfm(const std::filesystem::path& path);

}  // namespace fdn::feat
