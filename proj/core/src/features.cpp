#include "flowdenoise/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "binio.hpp"
#include "flowdenoise/errors.hpp"
#include "kernels.hpp"

namespace fdn::feat {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
}

double bark_from_hz(double f_hz) {
  return 26.81 * f_hz / (1960.0 + f_hz) - 0.53;
}

double hz_from_bark(double bark) {
  const double u = bark + 0.53;
  return 1960.0 * u / (26.81 - u);
}

double critical_bandwidth_hz(double f_hz) {
  const double khz = f_hz / 1000.0;
  return 25.0 + 75.0 * std::pow(1.0 + 1.4 * khz * khz, 0.69);
}

// ---------------------------------------------------------------------------
// Mel spectrogram

int mel_hop(const MelConfig& cfg) {
  return static_cast<int>(std::lround(cfg.fft_size * (1.0 - cfg.overlap)));
}

int mel_frame_count(const MelConfig& cfg, size_t n_samples) {
  if (n_samples < static_cast<size_t>(cfg.fft_size)) return 0;
  return 1 + static_cast<int>((n_samples - cfg.fft_size) / mel_hop(cfg));
}

namespace {

void validate_mel(const MelConfig& cfg, double nyquist) {
  if (cfg.fft_size < 2 || (cfg.fft_size & (cfg.fft_size - 1)) != 0)
    throw ValueError("mel: fft_size must be a power of two");
  if (cfg.overlap < 0.0 || cfg.overlap >= 1.0)
    throw ValueError("mel: overlap must be in [0, 1)");
  if (cfg.n_bands < 1) throw ValueError("mel: n_bands must be >= 1");
  const double fmax = cfg.fmax_hz > 0.0 ? cfg.fmax_hz : nyquist;
  if (cfg.fmin_hz < 0.0 || cfg.fmin_hz >= fmax || fmax > nyquist)
    throw ValueError("mel: need 0 <= fmin < fmax <= Nyquist");
  if (mel_hop(cfg) < 1) throw ValueError("mel: hop underflow");
}

double mel_from_hz(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double hz_from_mel(double m) {
  return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0);
}

// Triangular weights per band over the r2c bins, edges uniform on the Mel
// scale. weights is n_bands x (fft/2 + 1).
Tensor<double> mel_weights(const MelConfig& cfg, int sample_rate) {
  const int n_bins = cfg.fft_size / 2 + 1;
  const double fmax =
      cfg.fmax_hz > 0.0 ? cfg.fmax_hz : sample_rate / 2.0;
  const double m_lo = mel_from_hz(cfg.fmin_hz);
  const double m_hi = mel_from_hz(fmax);
  std::vector<double> edge(cfg.n_bands + 2);
  for (int j = 0; j < cfg.n_bands + 2; ++j)
    edge[j] = hz_from_mel(m_lo + (m_hi - m_lo) * j / (cfg.n_bands + 1));
  Tensor<double> w(cfg.n_bands, n_bins);
  for (int i = 0; i < cfg.n_bands; ++i) {
    const double lo = edge[i], mid = edge[i + 1], hi = edge[i + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / cfg.fft_size;
      double v = 0.0;
      if (f > lo && f < mid)
        v = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        v = (hi - f) / (hi - mid);
      w(i, k) = v;
    }
  }
  return w;
}

}  // namespace

FeatureMap mel_spectrogram(const MelConfig& cfg, const audio::Waveform& w) {
  validate_mel(cfg, w.sample_rate / 2.0);
  const size_t n = w.samples.size();
  if (n < static_cast<size_t>(cfg.fft_size))
    throw ValueError("mel: input shorter than one frame");
  const int hop = mel_hop(cfg);
  const int frames = mel_frame_count(cfg, n);
  const int n_bins = cfg.fft_size / 2 + 1;

  std::vector<double> window(cfg.fft_size);
  for (int i = 0; i < cfg.fft_size; ++i)
    window[i] = 0.5 * (1.0 - std::cos(kTwoPi * i / cfg.fft_size));

  double* in = fftw_alloc_real(cfg.fft_size);
  fftw_complex* out = fftw_alloc_complex(n_bins);
  fftw_plan plan =
      fftw_plan_dft_r2c_1d(cfg.fft_size, in, out, FFTW_ESTIMATE);
  if (plan == nullptr) {
    fftw_free(in);
    fftw_free(out);
    throw NumericError("mel: FFT plan failed");
  }

  const Tensor<double> weights = mel_weights(cfg, w.sample_rate);
  FeatureMap fm;
  fm.data = Tensor<double>(cfg.n_bands, frames);
  fm.frame_rate = static_cast<double>(w.sample_rate) / hop;
  fm.kind = FeatureKind::kMel;

  std::vector<double> mag(n_bins);
  for (int t = 0; t < frames; ++t) {
    const double* frame = w.samples.data() + static_cast<size_t>(t) * hop;
    for (int i = 0; i < cfg.fft_size; ++i) in[i] = frame[i] * window[i];
    fftw_execute(plan);
    for (int k = 0; k < n_bins; ++k)
      mag[k] = std::hypot(out[k][0], out[k][1]);
    for (int b = 0; b < cfg.n_bands; ++b) {
      double acc = 0.0;
      const double* wr = weights.data() + static_cast<size_t>(b) * n_bins;
      for (int k = 0; k < n_bins; ++k) acc += wr[k] * mag[k];
      fm.data(b, t) = acc;
    }
  }
  fftw_destroy_plan(plan);
  fftw_free(in);
  fftw_free(out);
  return fm;
}

// ---------------------------------------------------------------------------
// All-pole gammatone filterbank

namespace {

void validate_apg(const ApgConfig& cfg) {
  if (cfg.n_bands < 2) throw ValueError("apg: n_bands must be >= 2");
  if (cfg.order < 1) throw ValueError("apg: order must be >= 1");
  if (cfg.lookahead < 0.0 || cfg.lookahead > 1.0)
    throw ValueError("apg: lookahead must be in [0, 1]");
  if (cfg.bandwidth_scale <= 0.0)
    throw ValueError("apg: bandwidth_scale must be > 0");
  if (cfg.fmin_hz <= 0.0) throw ValueError("apg: fmin must be > 0");
}

// One band's complex cascade run over a real input; states start at zero.
std::vector<std::complex<double>> run_cascade(const ApgBand& band, int order,
                                              const double* x, size_t n) {
  std::vector<std::complex<double>> state(order, {0.0, 0.0});
  std::vector<std::complex<double>> y(n);
  const std::complex<double> p = band.pole;
  const double g = band.per_stage_gain;
  for (size_t t = 0; t < n; ++t) {
    std::complex<double> v(g * x[t], 0.0);
    for (int j = 0; j < order; ++j) {
      v += p * state[j];
      state[j] = v;
      if (j + 1 < order) v *= g;
    }
    y[t] = v;
  }
  return y;
}

int envelope_argmax(const std::vector<double>& env) {
  return static_cast<int>(std::max_element(env.begin(), env.end()) -
                          env.begin());
}

}  // namespace

std::vector<double> apg_impulse_envelope(const ApgFilterbank& fb, int band,
                                         int length) {
  if (band < 0 || band >= fb.n_bands()) throw ValueError("apg: band index");
  std::vector<double> impulse(length, 0.0);
  if (length > 0) impulse[0] = 1.0;
  const auto y = run_cascade(fb.bands[band], fb.order, impulse.data(),
                             impulse.size());
  std::vector<double> env(length);
  for (int i = 0; i < length; ++i) env[i] = std::abs(y[i]);
  return env;
}

ApgFilterbank design_apg(const ApgConfig& cfg, int sample_rate) {
  validate_apg(cfg);
  if (sample_rate < 1) throw ValueError("apg: sample_rate");
  const double nyquist = sample_rate / 2.0;
  const double f_top = 0.98 * nyquist;
  if (cfg.fmin_hz >= f_top)
    throw ValueError("apg: fmin must lie below 0.98*Nyquist");

  ApgFilterbank fb;
  fb.order = cfg.order;
  fb.sample_rate = sample_rate;
  fb.bands.resize(cfg.n_bands);

  const double z_lo = bark_from_hz(cfg.fmin_hz);
  const double z_hi = bark_from_hz(f_top);
  const double dz = (z_hi - z_lo) / (cfg.n_bands - 1);

  const double stage_factor =
      2.0 * std::sqrt(std::pow(2.0, 1.0 / cfg.order) - 1.0);
  double prev_fc = 0.0;
  for (int i = 0; i < cfg.n_bands; ++i) {
    ApgBand& band = fb.bands[i];
    if (i == 0)
      band.center_freq_hz = cfg.fmin_hz;
    else if (i == cfg.n_bands - 1)
      band.center_freq_hz = f_top;
    else
      band.center_freq_hz = hz_from_bark(z_lo + dz * i);
    if (band.center_freq_hz <= prev_fc)
      throw ValueError("apg: band centers collide, reduce n_bands");
    prev_fc = band.center_freq_hz;

    const double beta = cfg.bandwidth_scale *
                        critical_bandwidth_hz(band.center_freq_hz) /
                        stage_factor;
    const double lambda = std::exp(-kTwoPi * beta / sample_rate);
    if (!(lambda < 1.0) || lambda <= 0.0)
      throw NumericError("apg: unstable pole radius");
    const double theta = kTwoPi * band.center_freq_hz / sample_rate;
    band.pole = std::polar(lambda, theta);
    band.per_stage_gain = 1.0 - lambda;
  }

  // Envelope-peak delay per band, measured on the designed cascade. The run
  // is extended until the peak is interior and the tail has decayed.
  for (int i = 0; i < cfg.n_bands; ++i) {
    int length = 4096;
    const int max_length = 2 * sample_rate;
    for (;;) {
      const auto env = apg_impulse_envelope(fb, i, length);
      const int peak = envelope_argmax(env);
      const bool settled =
          peak < length - length / 4 && env.back() < env[peak] * 1e-6;
      if (settled || length >= max_length) {
        fb.bands[i].delay_comp =
            static_cast<int>(std::lround(cfg.lookahead * peak));
        break;
      }
      length = std::min(2 * length, max_length);
    }
  }
  return fb;
}

FeatureMap apg_analyze(const ApgFilterbank& fb, const audio::Waveform& w) {
  if (w.sample_rate != fb.sample_rate)
    throw ValueError("apg: sample rate mismatch with filterbank design");
  const size_t n = w.samples.size();
  FeatureMap fm;
  fm.data = Tensor<double>(fb.n_bands(), static_cast<int>(n));
  fm.frame_rate = static_cast<double>(fb.sample_rate);
  fm.kind = FeatureKind::kApg;
  for (int b = 0; b < fb.n_bands(); ++b) {
    const auto y = run_cascade(fb.bands[b], fb.order, w.samples.data(), n);
    const int shift = fb.bands[b].delay_comp;
    double* row = fm.data.data() + static_cast<size_t>(b) * n;
    for (size_t t = 0; t < n; ++t) {
      const size_t src = t + static_cast<size_t>(shift);
      row[t] = src < n ? std::abs(y[src]) : 0.0;
    }
  }
  return fm;
}

std::vector<std::complex<double>> apg_run_band(const ApgFilterbank& fb,
                                               int band,
                                               const std::vector<double>& x) {
  if (band < 0 || band >= fb.n_bands()) throw ValueError("apg: band index");
  return run_cascade(fb.bands[band], fb.order, x.data(), x.size());
}

double apg_response_at(const ApgFilterbank& fb, int band, double f_hz) {
  if (band < 0 || band >= fb.n_bands()) throw ValueError("apg: band index");
  const ApgBand& b = fb.bands[band];
  const double omega = kTwoPi * f_hz / fb.sample_rate;
  const std::complex<double> z_inv = std::polar(1.0, -omega);
  const double stage = b.per_stage_gain / std::abs(1.0 - b.pole * z_inv);
  return std::pow(stage, fb.order);
}

FeatureMap time_features(const audio::Waveform& w) {
  FeatureMap fm;
  fm.data = Tensor<double>(1, static_cast<int>(w.samples.size()));
  std::copy(w.samples.begin(), w.samples.end(), fm.data.data());
  fm.frame_rate = static_cast<double>(w.sample_rate);
  fm.kind = FeatureKind::kTime;
  return fm;
}

// ---------------------------------------------------------------------------
// Learned upsampling

UpsamplerParams nearest_neighbor_upsampler(int channels, int stride) {
  if (channels < 1 || stride < 1) throw ValueError("upsampler: shape");
  UpsamplerParams p;
  p.stride = stride;
  p.kernel = Tensor<double>(channels, 2 * stride);
  p.bias = Tensor<double>(1, channels);
  for (int c = 0; c < channels; ++c)
    for (int j = 0; j < stride; ++j) p.kernel(c, j) = 1.0;
  return p;
}

FeatureMap upsample_features(const FeatureMap& fm, size_t target_len,
                             const UpsamplerParams& params) {
  if (fm.kind != FeatureKind::kMel)
    throw ValueError("upsample: only frame-rate (mel) maps are upsampled");
  if (params.kernel.rows() != fm.channels())
    throw ShapeError("upsample: kernel channel count");
  if (params.kernel.cols() != 2 * params.stride)
    throw ShapeError("upsample: kernel length must be 2*stride");
  if (target_len < static_cast<size_t>(fm.frames()))
    throw ValueError("upsample: target shorter than input frames");
  FeatureMap out;
  kern::tconv_depthwise_forward(params.kernel, &params.bias, params.stride,
                                static_cast<int>(target_len), fm.data,
                                out.data);
  out.frame_rate = fm.frame_rate * params.stride;
  out.kind = FeatureKind::kMel;
  return out;
}

// ---------------------------------------------------------------------------
// FDFM dump container

namespace {
constexpr char kFdfmMagic[4] = {'F', 'D', 'F', 'M'};
constexpr uint32_t kFdfmVersion = 1;
}  // namespace

void write_fdfm(const std::filesystem::path& path, const FeatureMap& fm) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  binio::write_magic(os, kFdfmMagic);
  binio::write_pod<uint32_t>(os, kFdfmVersion);
  binio::write_pod<uint32_t>(os, static_cast<uint32_t>(fm.channels()));
  binio::write_pod<uint64_t>(os, static_cast<uint64_t>(fm.frames()));
  binio::write_pod<double>(os, fm.frame_rate);
  binio::write_pod<uint8_t>(os, static_cast<uint8_t>(fm.kind));
  binio::write_f32_array(os, fm.data.data(), fm.data.size());
  if (!os) throw IoError("short write: " + path.string());
}

FeatureMap read_fdfm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  binio::expect_magic(is, kFdfmMagic, "FDFM");
  const auto version = binio::read_pod<uint32_t>(is, "version");
  if (version != kFdfmVersion) throw FormatError("unsupported FDFM version");
  const auto c = binio::read_pod<uint32_t>(is, "channels");
  const auto t = binio::read_pod<uint64_t>(is, "frames");
  const auto rate = binio::read_pod<double>(is, "frame_rate");
  const auto kind = binio::read_pod<uint8_t>(is, "kind");
  if (kind > 2) throw FormatError("unknown feature kind");
  FeatureMap fm;
  fm.data = Tensor<double>(static_cast<int>(c), static_cast<int>(t));
  fm.frame_rate = rate;
  fm.kind = static_cast<FeatureKind>(kind);
  binio::read_f32_array(is, fm.data.data(), fm.data.size(), "FDFM data");
  return fm;
}

}  // namespace fdn::feat
