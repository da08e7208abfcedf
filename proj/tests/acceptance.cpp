// Acceptance gate for the flow-denoise artifact. Each numbered criterion
// prints exactly one PASS/FAIL line with its pinned tolerances and measured
// values; the process exits 0 only if every criterion passes.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "flowdenoise/audio.hpp"
#include "flowdenoise/features.hpp"
#include "flowdenoise/flow.hpp"
#include "flowdenoise/gradcheck.hpp"
#include "flowdenoise/loudness.hpp"
#include "flowdenoise/rng.hpp"
#include "flowdenoise/train.hpp"
#include "testutil.hpp"

using namespace fdn;
namespace tu = testutil;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Outcome {
  bool ok = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::string fmt(const char* format, ...) {
  va_list args;
  va_start(args, format);
  char buf[512];
  std::vsnprintf(buf, sizeof buf, format, args);
  va_end(args);
  return buf;
}

// --- shared helpers -------------------------------------------------------

template <typename T>
void jitter_params(flow::FlowModel<T>& m, uint64_t seed, double scale) {
  Rng rng(seed);
  for (size_t i = 0; i < m.n_params(); ++i) {
    Tensor<T>& p = m.param(static_cast<int>(i));
    for (size_t k = 0; k < p.size(); ++k) {
      p[k] += static_cast<T>(scale * rng.normal());
    }
  }
}

audio::Waveform random_wave(size_t n, uint64_t seed, double scale) {
  Rng rng(seed);
  audio::Waveform w;
  w.sample_rate = 16000;
  w.samples.resize(n);
  for (double& s : w.samples) s = scale * rng.normal();
  return w;
}

double rel_rms(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

// log|det| by Gaussian elimination with partial pivoting; independent of the
// production LU path.
double logabsdet(std::vector<std::vector<double>> a) {
  const size_t n = a.size();
  double acc = 0.0;
  for (size_t col = 0; col < n; ++col) {
    size_t piv = col;
    for (size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    }
    if (piv != col) std::swap(a[piv], a[col]);
    const double d = a[col][col];
    if (d == 0.0) return -std::numeric_limits<double>::infinity();
    acc += std::log(std::abs(d));
    for (size_t r = col + 1; r < n; ++r) {
      const double f = a[r][col] / d;
      for (size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
    }
  }
  return acc;
}

std::string bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_tool(const std::string& args, const fs::path& log) {
  const std::string cmd =
      std::string(FLOWDENOISE_CLI_PATH) + " " + args + " > " + log.string() +
      " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

audio::Waveform tone_bursts(double freq_hz, int reps, int sample_rate,
                            double amplitude) {
  audio::Waveform w;
  w.sample_rate = sample_rate;
  const int seg = sample_rate / 2;
  for (int r = 0; r < reps; ++r) {
    for (int i = 0; i < seg; ++i) {
      w.samples.push_back(amplitude *
                          std::sin(2.0 * kPi * freq_hz * i / sample_rate));
    }
    w.samples.insert(w.samples.end(), seg, 0.0);
  }
  return w;
}

audio::Waveform added(const audio::Waveform& a, const audio::Waveform& b,
                      double gain_b) {
  audio::Waveform out = a;
  for (size_t i = 0; i < out.samples.size(); ++i) {
    out.samples[i] += gain_b * b.samples[i];
  }
  return out;
}

// --- criteria ---------------------------------------------------------------

// 1. Invertibility of the default configuration and a tiny f64 flow.
Outcome criterion_invertibility() {
  const auto t0 = std::chrono::steady_clock::now();

  flow::FlowConfig big;  // 16 blocks, g = 12, time cond
  big.mode = flow::CouplingMode::kDouble;
  flow::FlowModel<float> mf(big);
  mf.randomize_parameters(42);
  jitter_params(mf, 43, 0.02);

  double worst_f32 = 0.0;
  for (int i = 0; i < 10; ++i) {
    // 1 s nominal, rounded up to the squeeze multiple.
    audio::Waveform x = random_wave(16008, 1000 + i, 0.3);
    const auto fwd = flow::flow_forward(mf, x, x);
    const audio::Waveform back = flow::flow_inverse(mf, fwd.z, x);
    worst_f32 = std::max(worst_f32, rel_rms(back.samples, x.samples));
  }

  flow::FlowConfig tiny;
  tiny.n_blocks = 2;
  tiny.g = 4;
  tiny.mode = flow::CouplingMode::kDouble;
  tiny.hidden_channels = 12;
  tiny.n_layers = 2;
  tiny.cond_channels = 6;
  flow::FlowModel<double> md(tiny);
  md.randomize_parameters(7);
  jitter_params(md, 8, 0.05);

  double worst_f64 = 0.0;
  for (int i = 0; i < 10; ++i) {
    audio::Waveform x = random_wave(640, 2000 + i, 0.3);
    const auto fwd = flow::flow_forward(md, x, x);
    const audio::Waveform back = flow::flow_inverse(md, fwd.z, x);
    worst_f64 = std::max(worst_f64, rel_rms(back.samples, x.samples));
  }

  const double dt = seconds_since(t0);
  const bool ok = worst_f32 < 1e-5 && worst_f64 < 1e-10 && dt < 120.0;
  return {ok, fmt("10x1s default-config rel RMS %.2e (tol 1e-05), tiny f64 "
                  "%.2e (tol 1e-10), %.1f s (budget 120 s)",
                  worst_f32, worst_f64, dt)};
}

// 2. exp(total_logdet) equals |det| of the finite-difference Jacobian.
Outcome criterion_logdet() {
  const auto t0 = std::chrono::steady_clock::now();

  flow::FlowConfig cfg;
  cfg.n_blocks = 2;
  cfg.g = 4;
  cfg.mode = flow::CouplingMode::kDouble;
  cfg.hidden_channels = 8;
  cfg.n_layers = 2;
  cfg.cond_channels = 4;

  const size_t n = 64;  // T = 16 frames, D = 64 dims
  const double h = 1e-5;
  double worst = 0.0;
  for (int draw = 0; draw < 5; ++draw) {
    flow::FlowModel<double> m(cfg);
    m.randomize_parameters(300 + draw);
    jitter_params(m, 400 + draw, 0.05);

    const audio::Waveform x = random_wave(n, 500 + draw, 0.3);
    const audio::Waveform cond = random_wave(n, 600 + draw, 0.3);
    const auto fwd = flow::flow_forward(m, x, cond);

    std::vector<std::vector<double>> jac(n, std::vector<double>(n, 0.0));
    for (size_t j = 0; j < n; ++j) {
      audio::Waveform xp = x;
      audio::Waveform xm = x;
      xp.samples[j] += h;
      xm.samples[j] -= h;
      const auto zp = flow::flow_forward(m, xp, cond).z;
      const auto zm = flow::flow_forward(m, xm, cond).z;
      for (size_t k = 0; k < n; ++k) {
        jac[k][j] = (zp[k] - zm[k]) / (2.0 * h);
      }
    }
    const double fd = logabsdet(std::move(jac));
    const double err = std::abs(fd - fwd.total_logdet) /
                       std::max(1.0, std::abs(fwd.total_logdet));
    worst = std::max(worst, err);
  }

  const double dt = seconds_since(t0);
  const bool ok = worst < 1e-6 && dt < 60.0;
  return {ok, fmt("G=4, 2 blocks, T=16, D=64, 5 draws: worst rel logdet err "
                  "%.2e (tol 1e-06), %.1f s (budget 60 s)",
                  worst, dt)};
}

// 3. Coupling algebra: constant-subnet hand case; single mode copies x2.
Outcome criterion_coupling() {
  flow::FlowConfig cfg;
  cfg.n_blocks = 1;
  cfg.g = 4;
  cfg.mode = flow::CouplingMode::kDouble;
  cfg.hidden_channels = 8;
  cfg.n_layers = 2;
  cfg.cond_channels = 4;

  flow::FlowModel<double> m(cfg);
  m.randomize_parameters(11);
  // Force both subnets constant: log_s = ln 2, t = 1 regardless of input.
  const double ln2 = std::log(2.0);
  for (const flow::SubnetRef* sn :
       {&m.blocks()[0].subnet_1, &*m.blocks()[0].subnet_2}) {
    m.param(sn->out_w).fill(0.0);
    Tensor<double>& b = m.param(sn->out_b);
    b[0] = ln2;
    b[1] = ln2;
    b[2] = 1.0;
    b[3] = 1.0;
  }

  const int frames = 10;
  Tensor<double> x(4, frames);
  x.fill(1.0);
  Tensor<double> cond(cfg.cond_channels, frames);
  cond.fill(0.25);

  const auto res = flow::coupling_forward(m, 0, x, cond);
  double worst_y = 0.0;
  for (size_t k = 0; k < res.y.size(); ++k) {
    worst_y = std::max(worst_y, std::abs(res.y[k] - 3.0));  // 2*1 + 1
  }
  const double want_logdet = 2.0 * 2.0 * frames * ln2;  // both halves, 2 rows
  const double logdet_err = std::abs(res.logdet - want_logdet);

  const Tensor<double> inv = flow::coupling_inverse(m, 0, res.y, cond);
  double worst_inv = 0.0;
  for (size_t k = 0; k < inv.size(); ++k) {
    worst_inv = std::max(worst_inv, std::abs(inv[k] - 1.0));
  }

  // Single mode: the conditioning half passes through bit for bit.
  cfg.mode = flow::CouplingMode::kSingle;
  flow::FlowModel<double> ms(cfg);
  ms.randomize_parameters(12);
  jitter_params(ms, 13, 0.1);
  Tensor<double> xr(4, frames);
  Rng rng(14);
  for (size_t k = 0; k < xr.size(); ++k) xr[k] = rng.normal();
  const auto rs = flow::coupling_forward(ms, 0, xr, cond);
  bool x2_bitwise = true;
  bool x1_changed = false;
  for (int r = 0; r < 4; ++r) {
    for (int t = 0; t < frames; ++t) {
      if (r >= 2 && rs.y(r, t) != xr(r, t)) x2_bitwise = false;
      if (r < 2 && rs.y(r, t) != xr(r, t)) x1_changed = true;
    }
  }

  const bool ok = worst_y < 1e-13 && logdet_err < 1e-13 && worst_inv < 1e-12 &&
                  x2_bitwise && x1_changed;
  return {ok, fmt("constant-subnet case: |y-3| %.1e, |logdet-4T*ln2| %.1e, "
                  "inverse err %.1e (tols 1e-13/1e-13/1e-12); single mode x2 "
                  "bitwise %s",
                  worst_y, logdet_err, worst_inv, x2_bitwise ? "yes" : "NO")};
}

// 4. Finite-difference gradient check over every primitive and the tiny NLL.
Outcome criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const gradcheck::Report report = gradcheck::run_suite(1234, 0.0);
  bool all_rows = !report.rows.empty();
  for (const auto& row : report.rows) {
    if (row.n_checked <= 0) all_rows = false;
  }
  const double dt = seconds_since(t0);
  const bool ok = all_rows && report.max_rel_err < 1e-4 && dt < 300.0;
  return {ok, fmt("%zu primitives: max rel err %.2e in '%s' (tol 1e-04), "
                  "%.1f s (budget 300 s)",
                  report.rows.size(), report.max_rel_err,
                  report.worst.c_str(), dt)};
}

// 5. Training learns on a toy set and enhancement beats the noisy input.
Outcome criterion_training(const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  tu::ToyDataset train_set =
      tu::make_toy_dataset(dir / "train", 20, 1.0, 16000, 401);
  tu::ToyDataset test_set =
      tu::make_toy_dataset(dir / "test", 20, 1.0, 16000, 901);

  train::TrainConfig cfg;
  cfg.train_manifest = train_set.manifest;
  cfg.val_manifest = train_set.manifest;
  cfg.out_dir = dir / "run";
  cfg.epochs = 20;
  cfg.batch_size = 4;
  cfg.chunk_s = 0.5;
  cfg.seed = 17;
  cfg.adam.lr = 1e-3;
  cfg.model.n_blocks = 4;
  cfg.model.g = 8;
  cfg.model.mode = flow::CouplingMode::kDouble;
  cfg.model.cond_kind = feat::FeatureKind::kTime;
  cfg.model.hidden_channels = 32;
  cfg.model.n_layers = 4;
  cfg.model.cond_channels = 16;

  const train::TrainResult res = train::train(cfg);
  const double nll0 = res.rows.front().val_nll;
  const double nll20 = res.rows.back().val_nll;

  flow::FlowModel<float> model =
      flow::load_checkpoint<float>(res.best_checkpoint);
  int wins = 0;
  uint64_t idx = 0;
  for (const auto& item : audio::read_manifest(test_set.manifest)) {
    const audio::Waveform clean = audio::read_wav(item.clean_path);
    const audio::Waveform noise = audio::read_wav(item.noise_path);
    const audio::Waveform noisy =
        audio::mix_at_snr(clean, noise, audio::SnrSpec{item.snr_db}).mixture;
    const audio::Waveform enhanced =
        train::enhance(model, noisy, 0.5, Rng::derive(99, idx++));
    if (train::si_sdr(enhanced, clean) > train::si_sdr(noisy, clean)) ++wins;
  }

  const double dt = seconds_since(t0);
  const bool ok = nll20 < nll0 && wins >= 14 && dt < 1800.0;
  return {ok, fmt("20 items, 20 epochs: val NLL %.3f -> %.3f (must drop), "
                  "SI-SDR wins %d/20 (need >= 14), %.1f s (budget 1800 s)",
                  nll0, nll20, wins, dt)};
}

// 6. Parameter counts of the published configuration.
Outcome criterion_param_counts() {
  flow::FlowConfig single;  // defaults: single coupling, time cond
  flow::FlowConfig dbl = single;
  dbl.mode = flow::CouplingMode::kDouble;

  const double n_single =
      static_cast<double>(flow::FlowModel<float>(single).count_parameters());
  const double n_double =
      static_cast<double>(flow::FlowModel<float>(dbl).count_parameters());
  const double ratio = n_double / n_single;

  const bool ok = n_single > 0.8 * 8.8e6 && n_single < 1.2 * 8.8e6 &&
                  ratio > 1.8 && ratio < 2.2;
  return {ok, fmt("single/time default %.0f (8.8M +/- 20%%), double/single "
                  "ratio %.4f (range [1.8, 2.2])",
                  n_single, ratio)};
}

// 7. All-pole gammatone design properties.
Outcome criterion_apg() {
  const feat::ApgFilterbank fb = feat::design_apg(feat::ApgConfig{}, 16000);
  const double nyq = 8000.0;

  bool bands_ok = fb.n_bands() == 80 && fb.bands[0].center_freq_hz == 40.0;

  // Constant Bark spacing.
  double spacing_err = 0.0;
  const double dz0 = feat::bark_from_hz(fb.bands[1].center_freq_hz) -
                     feat::bark_from_hz(fb.bands[0].center_freq_hz);
  for (int b = 1; b < fb.n_bands(); ++b) {
    const double dz = feat::bark_from_hz(fb.bands[b].center_freq_hz) -
                      feat::bark_from_hz(fb.bands[b - 1].center_freq_hz);
    spacing_err = std::max(spacing_err, std::abs(dz - dz0));
  }

  bool poles_ok = true;
  for (int b = 0; b < fb.n_bands(); ++b) {
    if (!(std::abs(fb.bands[b].pole) < 1.0)) poles_ok = false;
  }

  // Measured response peak within 2% of the design center.
  double worst_peak_off = 0.0;
  for (int b = 0; b < fb.n_bands(); ++b) {
    const double fc = fb.bands[b].center_freq_hz;
    double best_f = fc, best_r = 0.0;
    for (double s = 0.90; s <= 1.10001; s += 0.0025) {
      const double f = fc * s;
      if (f >= nyq) break;
      const double r = feat::apg_response_at(fb, b, f);
      if (r > best_r) {
        best_r = r;
        best_f = f;
      }
    }
    worst_peak_off = std::max(worst_peak_off, std::abs(best_f - fc) / fc);
  }

  // -3 dB bandwidth vs the Bark critical bandwidth, for every band whose
  // half-power points both fall inside (0, Nyquist).
  const auto edge = [&](int b, double inside, double outside) {
    for (int it = 0; it < 80; ++it) {
      const double mid = 0.5 * (inside + outside);
      if (feat::apg_response_at(fb, b, mid) > M_SQRT1_2)
        inside = mid;
      else
        outside = mid;
    }
    return 0.5 * (inside + outside);
  };
  int measurable = 0, bw_ok = 0, clipped = 0;
  double worst_bw = 0.0;
  for (int b = 0; b < fb.n_bands(); ++b) {
    const double fc = fb.bands[b].center_freq_hz;
    const double target = feat::critical_bandwidth_hz(fc);
    const double lo_probe = std::max(1.0, fc - 2.0 * target);
    const double hi_probe = std::min(nyq - 1.0, fc + 2.0 * target);
    if (feat::apg_response_at(fb, b, lo_probe) > M_SQRT1_2 ||
        feat::apg_response_at(fb, b, hi_probe) > M_SQRT1_2) {
      ++clipped;  // half-power point beyond DC or Nyquist: not measurable
      continue;
    }
    const double bw = edge(b, fc, hi_probe) - edge(b, fc, lo_probe);
    const double err = std::abs(bw - target) / target;
    ++measurable;
    if (err <= 0.10) ++bw_ok;
    worst_bw = std::max(worst_bw, err);
  }

  // Envelope peak after compensation sits at ~0.3 of the raw peak delay.
  audio::Waveform impulse;
  impulse.sample_rate = 16000;
  impulse.samples.assign(16000, 0.0);
  impulse.samples[0] = 1.0;
  const feat::FeatureMap env = feat::apg_analyze(fb, impulse);
  bool peaks_ok = true;
  for (int b = 0; b < fb.n_bands(); ++b) {
    const std::vector<double> raw = feat::apg_impulse_envelope(fb, b, 16000);
    size_t d_peak = 0;
    for (size_t i = 1; i < raw.size(); ++i) {
      if (raw[i] > raw[d_peak]) d_peak = i;
    }
    size_t comp_peak = 0;
    for (int t = 1; t < env.frames(); ++t) {
      if (env.data(b, t) > env.data(b, static_cast<int>(comp_peak)))
        comp_peak = static_cast<size_t>(t);
    }
    const double want = 0.3 * static_cast<double>(d_peak);
    const double slack = 0.3 * static_cast<double>(d_peak) + 1.0;
    if (std::abs(static_cast<double>(comp_peak) - want) > slack)
      peaks_ok = false;
  }

  const bool ok = bands_ok && spacing_err < 1e-9 && poles_ok &&
                  worst_peak_off <= 0.02 && bw_ok == measurable &&
                  measurable >= 70 && peaks_ok;
  return {ok, fmt("80 bands from 40 Hz, Bark spacing err %.1e (tol 1e-09), "
                  "peak offset %.3f%% (tol 2%%), -3 dB bw ok %d/%d measurable "
                  "(%d edge-clipped, tol 10%%, worst %.2f%%), lookahead peaks "
                  "%s",
                  spacing_err, 100.0 * worst_peak_off, bw_ok, measurable,
                  clipped, 100.0 * worst_bw, peaks_ok ? "ok" : "OFF")};
}

// 8. Mel front end equals the brute-force DFT oracle.
Outcome criterion_mel() {
  const feat::MelConfig cfg;
  double worst = 0.0;
  for (int k = 0; k < 10; ++k) {
    audio::Waveform w = tu::toy_speech(0.2, 16000, 700 + k);
    const audio::Waveform noise = tu::white_noise(0.2, 16000, 0.1, 800 + k);
    for (size_t i = 0; i < w.samples.size(); ++i) {
      w.samples[i] += noise.samples[i];
    }
    const feat::FeatureMap fm = feat::mel_spectrogram(cfg, w);
    const Tensor<double> oracle = tu::mel_oracle(cfg, w);
    double peak = 0.0;
    for (size_t i = 0; i < oracle.size(); ++i) {
      peak = std::max(peak, std::abs(oracle[i]));
    }
    worst = std::max(worst, tu::max_abs_diff(fm.data, oracle) / peak);
  }

  bool frames_ok = true;
  for (size_t n : {size_t{512}, size_t{640}, size_t{1000}, size_t{3200}}) {
    const audio::Waveform w = tu::white_noise(
        static_cast<double>(n) / 16000.0, 16000, 0.1, 900 + n);
    const feat::FeatureMap fm = feat::mel_spectrogram(cfg, w);
    const int want = 1 + static_cast<int>((n - 512) / 128);
    if (fm.frames() != want) frames_ok = false;
  }

  const bool ok = worst < 1e-6 && frames_ok;
  return {ok, fmt("10 random signals: worst peak-relative err %.2e (tol "
                  "1e-06), frame-count formula %s",
                  worst, frames_ok ? "exact" : "WRONG")};
}

// 9. Loudness pipeline facts.
Outcome criterion_loudness(const fs::path& dir) {
  const audio::Waveform tone = tu::sine(997.0, 1.5, 48000, 1.0);
  const double lufs = loudness::integrated_loudness(tone, false).lufs;
  const double tone_err = std::abs(lufs - -3.0103);

  audio::Waveform speech = tone_bursts(440.0, 2, 16000, 0.3);
  audio::Waveform half = speech;
  for (double& s : half.samples) s *= 0.5;
  const double hom_err =
      std::abs((loudness::integrated_loudness(half, false).lufs -
                loudness::integrated_loudness(speech, false).lufs) -
               20.0 * std::log10(0.5));

  // Stimulus levels and floors on a two-system item.
  loudness::StimulusItem item;
  item.item_id = "acc";
  item.clean = tone_bursts(440.0, 3, 16000, 0.3);
  const audio::Waveform noise =
      tu::white_noise(item.clean.duration_s(), 16000, 0.03, 33);
  item.mixture = added(item.clean, noise, 1.0);
  item.enhanced["perfect"] = item.clean;
  item.enhanced["light"] = added(item.clean, noise, 0.01);
  const loudness::StimulusSet set = loudness::prepare_stimuli(item, -23.0);

  double level_err = 0.0;
  for (const auto& [name, cr] : set.report.per_condition) {
    level_err = std::max(level_err, std::abs(cr.final_lufs - -23.0));
  }
  const double ref_floor =
      set.report.per_condition.at("reference").nonspeech_lufs;
  double floor_err = 0.0;
  for (const std::string name : {"perfect", "light"}) {
    floor_err = std::max(
        floor_err,
        std::abs(set.report.per_condition.at(name).nonspeech_lufs - ref_floor));
  }

  // +10 dB background perturbation: matching recovers the gain.
  const loudness::ActivityMask mask = loudness::speech_activity(item.clean);
  const double target =
      loudness::measure_masked_loudness(added(item.clean, noise, 1.0), mask,
                                        loudness::MaskKeep::kInactive)
          .lufs;
  audio::Waveform boosted = noise;
  for (double& s : boosted.samples) s *= std::pow(10.0, 0.5);
  const loudness::MatchResult m =
      loudness::match_noise_floor(item.clean, boosted, mask, target);
  const double recover_err = std::abs(m.gain_db - -10.0);

  (void)dir;
  const bool ok = tone_err < 0.1 && hom_err < 0.01 && level_err < 0.1 &&
                  floor_err < 0.25 && recover_err < 0.3;
  return {ok, fmt("997 Hz err %.3f LU (tol 0.1), homogeneity %.4f (tol 0.01), "
                  "stimulus level err %.3f (tol 0.1), floor spread %.3f (tol "
                  "0.25), +10 dB recovery err %.3f dB (tol 0.3)",
                  tone_err, hom_err, level_err, floor_err, recover_err)};
}

// 10. Bitwise determinism of checkpoints, enhanced files and stimulus sets.
Outcome criterion_determinism(const fs::path& dir) {
  tu::ToyDataset data = tu::make_toy_dataset(dir / "data", 8, 0.3, 16000, 11);

  train::TrainConfig cfg;
  cfg.train_manifest = data.manifest;
  cfg.val_manifest = data.manifest;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.chunk_s = 0.25;
  cfg.seed = 7;
  cfg.model.n_blocks = 2;
  cfg.model.g = 4;
  cfg.model.mode = flow::CouplingMode::kDouble;
  cfg.model.hidden_channels = 16;
  cfg.model.n_layers = 3;
  cfg.model.cond_channels = 8;

  cfg.out_dir = dir / "runA";
  train::train(cfg);
  cfg.out_dir = dir / "runB";
  train::train(cfg);
  const bool ckpt_same = !bytes_of(dir / "runA" / "last.fdck").empty() &&
                         bytes_of(dir / "runA" / "last.fdck") ==
                             bytes_of(dir / "runB" / "last.fdck");

  // Enhanced files via the command-line tool, identical seeds.
  const fs::path noisy_dir = dir / "noisy";
  fs::create_directories(noisy_dir);
  audio::write_wav(noisy_dir / "x.wav", tu::toy_speech(0.5, 16000, 77),
                   audio::WavEncoding::kFloat32);
  const std::string base = "enhance --ckpt " +
                           (dir / "runA" / "last.fdck").string() + " --in " +
                           noisy_dir.string() + " --sigma 0.5 --seed 21 --out ";
  const int rc1 = run_tool(base + (dir / "enhA").string(), dir / "e1.log");
  const int rc2 = run_tool(base + (dir / "enhB").string(), dir / "e2.log");
  const bool enh_same = rc1 == 0 && rc2 == 0 &&
                        !bytes_of(dir / "enhA" / "x.wav").empty() &&
                        bytes_of(dir / "enhA" / "x.wav") ==
                            bytes_of(dir / "enhB" / "x.wav");

  // Stimulus sets twice from the same inputs.
  loudness::StimulusItem item;
  item.item_id = "det";
  item.clean = tone_bursts(440.0, 3, 16000, 0.3);
  const audio::Waveform noise =
      tu::white_noise(item.clean.duration_s(), 16000, 0.03, 55);
  item.mixture = added(item.clean, noise, 1.0);
  item.enhanced["sys"] = item.clean;
  loudness::write_stimulus_set(dir / "stimA", loudness::prepare_stimuli(item));
  loudness::write_stimulus_set(dir / "stimB", loudness::prepare_stimuli(item));
  bool stim_same = true;
  for (const std::string f : {"reference.wav", "anchor.wav", "sys.wav"}) {
    const std::string a = bytes_of(dir / "stimA" / "det" / f);
    if (a.empty() || a != bytes_of(dir / "stimB" / "det" / f))
      stim_same = false;
  }

  const bool ok = ckpt_same && enh_same && stim_same;
  return {ok, fmt("checkpoints bitwise %s, enhanced files bitwise %s, "
                  "stimulus sets bitwise %s",
                  ckpt_same ? "equal" : "DIFFER",
                  enh_same ? "equal" : "DIFFER",
                  stim_same ? "equal" : "DIFFER")};
}

}  // namespace

int main() {
  const fs::path work = tu::scratch_dir("acceptance");

  std::vector<std::pair<const char*, Outcome>> results;
  results.emplace_back("invertibility", criterion_invertibility());
  results.emplace_back("logdet exactness", criterion_logdet());
  results.emplace_back("coupling algebra", criterion_coupling());
  results.emplace_back("gradient check", criterion_gradients());
  results.emplace_back("training sanity", criterion_training(work / "c5"));
  results.emplace_back("parameter counts", criterion_param_counts());
  results.emplace_back("apg design", criterion_apg());
  results.emplace_back("mel oracle", criterion_mel());
  results.emplace_back("loudness", criterion_loudness(work / "c9"));
  results.emplace_back("determinism", criterion_determinism(work / "c10"));

  int passed = 0;
  for (size_t i = 0; i < results.size(); ++i) {
    const auto& [name, r] = results[i];
    std::printf("[%s] criterion %2zu %-17s %s\n", r.ok ? "PASS" : "FAIL",
                i + 1, name, r.detail.c_str());
    if (r.ok) ++passed;
  }
  std::printf("acceptance: %d/%zu criteria passed\n", passed, results.size());
  return passed == static_cast<int>(results.size()) ? 0 : 1;
}
