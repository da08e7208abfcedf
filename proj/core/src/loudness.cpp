#include "flowdenoise/loudness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "flowdenoise/errors.hpp"

namespace fdn::loudness {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kLoudnessOffset = -0.691;
constexpr double kBlockS = 0.4;
constexpr double kBlockOverlap = 0.75;
constexpr double kAbsoluteGateLufs = -70.0;
constexpr double kRelativeGateLu = -10.0;

// Analog prototypes of the two K-weighting stages, recovered from the
// standard's tabulated 48 kHz coefficients by inverting the (non-prewarped)
// bilinear transform s = 2*fs*(z-1)/(z+1). Running them forward at 48 kHz
// reproduces the table to double rounding; other rates get the natural
// redesign. The published shelf parameterization (fc/G/Q through the cookbook
// shelf formula) does NOT reproduce the table; these rationals do.
//
// Shelf: H(s) = G*(s^2 + NB1*s + NB0) / (s^2 + DA1*s + DA0).
constexpr double kShelfG = 1.5848647011308555;
constexpr double kShelfNb1 = 11917.051572006395;
constexpr double kShelfNb0 = 71043608.44774321;
constexpr double kShelfDa1 = 15004.846526655717;
constexpr double kShelfDa0 = 112594507.26979007;
// High pass: numerator pinned to (1 - z^-1)^2 as in the table,
// denominator from H(s) = s^2 / (s^2 + DA1*s + DA0).
constexpr double kHpDa1 = 478.91221140842712;
constexpr double kHpDa0 = 57414.259358359233;

Biquad bilinear(double gain, double nb2, double nb1, double nb0, double da1,
                double da0, double fs) {
  const double k = 2.0 * fs;
  const double a0 = k * k + da1 * k + da0;
  Biquad q;
  q.b0 = gain * (nb2 * k * k + nb1 * k + nb0) / a0;
  q.b1 = gain * (2.0 * nb0 - 2.0 * nb2 * k * k) / a0;
  q.b2 = gain * (nb2 * k * k - nb1 * k + nb0) / a0;
  q.a1 = (2.0 * da0 - 2.0 * k * k) / a0;
  q.a2 = (k * k - da1 * k + da0) / a0;
  return q;
}

size_t block_length(int sample_rate) {
  return static_cast<size_t>(std::lround(kBlockS * sample_rate));
}

// -0.691 + 10*log10(power), with a -inf sentinel for zero power.
double lufs_from_power(double power) {
  if (!(power > 0.0)) return -kInf;
  return kLoudnessOffset + 10.0 * std::log10(power);
}

LoudnessReading integrated_loudness_samples(const std::vector<double>& x,
                                            int sample_rate, bool gated) {
  const size_t block = block_length(sample_rate);
  const size_t hop =
      static_cast<size_t>(std::lround(kBlockS * (1.0 - kBlockOverlap) *
                                      sample_rate));
  if (x.size() < block) {
    throw ValueError("loudness: input shorter than one 400 ms block (" +
                     std::to_string(x.size()) + " samples at " +
                     std::to_string(sample_rate) + " Hz)");
  }
  std::vector<double> powers;
  for (size_t start = 0; start + block <= x.size(); start += hop) {
    double ss = 0.0;
    for (size_t i = start; i < start + block; ++i) ss += x[i] * x[i];
    powers.push_back(ss / static_cast<double>(block));
  }

  LoudnessReading r;
  r.gated = gated;
  if (!gated) {
    double mean = 0.0;
    for (double p : powers) mean += p;
    r.lufs = lufs_from_power(mean / static_cast<double>(powers.size()));
    return r;
  }

  // Absolute gate at -70 LKFS.
  std::vector<double> kept;
  for (double p : powers) {
    if (lufs_from_power(p) > kAbsoluteGateLufs) kept.push_back(p);
  }
  if (kept.empty()) {
    r.lufs = -kInf;
    return r;
  }
  double mean = 0.0;
  for (double p : kept) mean += p;
  mean /= static_cast<double>(kept.size());
  const double relative_gate = lufs_from_power(mean) + kRelativeGateLu;

  double mean2 = 0.0;
  size_t n2 = 0;
  for (double p : kept) {
    if (lufs_from_power(p) > relative_gate) {
      mean2 += p;
      ++n2;
    }
  }
  r.lufs = (n2 == 0) ? -kInf : lufs_from_power(mean2 / static_cast<double>(n2));
  return r;
}

void require_same_shape(const audio::Waveform& a, const audio::Waveform& b,
                        const char* what) {
  if (a.samples.size() != b.samples.size() || a.sample_rate != b.sample_rate) {
    throw ShapeError(std::string(what) + ": length or rate mismatch (" +
                     std::to_string(a.samples.size()) + " vs " +
                     std::to_string(b.samples.size()) + ")");
  }
}

audio::Waveform apply_gain(const audio::Waveform& w, double gain) {
  audio::Waveform out = w;
  for (double& s : out.samples) s *= gain;
  return out;
}

audio::Waveform mix_with_gain(const audio::Waveform& speech,
                              const audio::Waveform& background,
                              double gain_db) {
  const double g = std::pow(10.0, gain_db / 20.0);
  audio::Waveform out = speech;
  for (size_t i = 0; i < out.samples.size(); ++i) {
    out.samples[i] += g * background.samples[i];
  }
  return out;
}

}  // namespace

audio::Waveform apply_biquads(const audio::Waveform& w,
                              const std::vector<Biquad>& sections) {
  audio::Waveform out = w;
  for (const Biquad& q : sections) {
    double z1 = 0.0, z2 = 0.0;
    for (double& s : out.samples) {
      const double x = s;
      const double y = q.b0 * x + z1;
      z1 = q.b1 * x - q.a1 * y + z2;
      z2 = q.b2 * x - q.a2 * y;
      s = y;
    }
  }
  return out;
}

KWeighting design_k_weighting(int sample_rate) {
  if (sample_rate != 48000 && sample_rate != 16000) {
    throw ValueError("k-weighting: unsupported sample rate " +
                     std::to_string(sample_rate) +
                     " (supported: 48000, 16000)");
  }
  const double fs = sample_rate;
  KWeighting k;
  k.shelf = bilinear(kShelfG, 1.0, kShelfNb1, kShelfNb0, kShelfDa1, kShelfDa0,
                     fs);
  k.highpass = bilinear(1.0, 1.0, 0.0, 0.0, kHpDa1, kHpDa0, fs);
  k.highpass.b0 = 1.0;
  k.highpass.b1 = -2.0;
  k.highpass.b2 = 1.0;
  return k;
}

audio::Waveform k_weight(const audio::Waveform& w) {
  const KWeighting k = design_k_weighting(w.sample_rate);
  return apply_biquads(w, {k.shelf, k.highpass});
}

LoudnessReading integrated_loudness(const audio::Waveform& w, bool gated) {
  const audio::Waveform kw = k_weight(w);
  return integrated_loudness_samples(kw.samples, kw.sample_rate, gated);
}

ActivityMask speech_activity(const audio::Waveform& clean,
                             const ActivityConfig& cfg) {
  const size_t n = clean.samples.size();
  ActivityMask mask;
  mask.active.assign(n, 0);
  if (n == 0) return mask;

  const size_t win = std::max<size_t>(
      1, static_cast<size_t>(std::lround(cfg.window_s * clean.sample_rate)));
  const size_t hop = std::max<size_t>(
      1, static_cast<size_t>(std::lround(cfg.hop_s * clean.sample_rate)));

  // RMS envelope every hop, window truncated at the end of the signal.
  const size_t n_frames = (n + hop - 1) / hop;
  std::vector<double> env(n_frames, 0.0);
  double peak = 0.0;
  for (size_t k = 0; k < n_frames; ++k) {
    const size_t start = k * hop;
    const size_t stop = std::min(n, start + win);
    double ss = 0.0;
    for (size_t i = start; i < stop; ++i) {
      ss += clean.samples[i] * clean.samples[i];
    }
    env[k] = std::sqrt(ss / static_cast<double>(stop - start));
    peak = std::max(peak, env[k]);
  }
  if (peak <= 0.0) return mask;  // silence -> all inactive

  const double threshold = peak * std::pow(10.0, cfg.threshold_db / 20.0);
  for (size_t i = 0; i < n; ++i) {
    const size_t k = std::min(i / hop, n_frames - 1);
    mask.active[i] = env[k] > threshold ? 1 : 0;
  }

  // Closing: fill inactive gaps shorter than close_gap_s that are bounded by
  // active samples on both sides.
  const size_t close_len =
      static_cast<size_t>(std::lround(cfg.close_gap_s * clean.sample_rate));
  size_t i = 0;
  while (i < n) {
    if (mask.active[i]) {
      ++i;
      continue;
    }
    size_t j = i;
    while (j < n && !mask.active[j]) ++j;
    const bool interior = i > 0 && j < n;
    if (interior && j - i < close_len) {
      std::fill(mask.active.begin() + i, mask.active.begin() + j, 1);
    }
    i = j;
  }

  // Opening: drop active islands shorter than open_island_s.
  const size_t open_len =
      static_cast<size_t>(std::lround(cfg.open_island_s * clean.sample_rate));
  i = 0;
  while (i < n) {
    if (!mask.active[i]) {
      ++i;
      continue;
    }
    size_t j = i;
    while (j < n && mask.active[j]) ++j;
    if (j - i < open_len) {
      std::fill(mask.active.begin() + i, mask.active.begin() + j, 0);
    }
    i = j;
  }
  return mask;
}

LoudnessReading measure_masked_loudness(const audio::Waveform& w,
                                        const ActivityMask& mask,
                                        MaskKeep keep) {
  if (mask.length() != w.samples.size()) {
    throw ShapeError("masked loudness: mask length " +
                     std::to_string(mask.length()) + " vs signal " +
                     std::to_string(w.samples.size()));
  }
  const uint8_t want = keep == MaskKeep::kActive ? 1 : 0;
  audio::Waveform selected;
  selected.sample_rate = w.sample_rate;
  for (size_t i = 0; i < w.samples.size(); ++i) {
    if (mask.active[i] == want) selected.samples.push_back(w.samples[i]);
  }
  if (selected.samples.size() < block_length(w.sample_rate)) {
    throw ValueError("masked loudness: selected part shorter than 400 ms (" +
                     std::to_string(selected.samples.size()) + " samples)");
  }
  return integrated_loudness(selected, /*gated=*/false);
}

audio::Waveform background_component(const audio::Waveform& mixture,
                                     const audio::Waveform& estimate) {
  require_same_shape(mixture, estimate, "background component");
  audio::Waveform out = mixture;
  for (size_t i = 0; i < out.samples.size(); ++i) {
    out.samples[i] -= estimate.samples[i];
  }
  return out;
}

audio::Waveform build_reference_condition(const audio::Waveform& clean,
                                          const audio::Waveform& background) {
  require_same_shape(clean, background, "reference condition");
  const double att = std::pow(10.0, -30.0 / 20.0);
  audio::Waveform out = clean;
  for (size_t i = 0; i < out.samples.size(); ++i) {
    out.samples[i] += att * background.samples[i];
  }
  return out;
}

MatchResult match_noise_floor(const audio::Waveform& condition_speech,
                              const audio::Waveform& condition_background,
                              const ActivityMask& mask, double target_lufs) {
  require_same_shape(condition_speech, condition_background, "noise floor");
  constexpr double kLoDb = -60.0;
  constexpr double kHiDb = 20.0;
  constexpr double kTolLu = 0.1;
  constexpr int kMaxIter = 40;

  const auto floor_at = [&](double gain_db) {
    return measure_masked_loudness(
               mix_with_gain(condition_speech, condition_background, gain_db),
               mask, MaskKeep::kInactive)
        .lufs;
  };

  const double f_lo = floor_at(kLoDb);
  if (f_lo > target_lufs + kTolLu) {
    throw ValueError(
        "noise floor match: floor exceeds target even at the -60 dB boundary "
        "(" +
        std::to_string(f_lo) + " LUFS vs target " +
        std::to_string(target_lufs) + ")");
  }
  const double f_hi = floor_at(kHiDb);
  if (f_hi < target_lufs - kTolLu) {
    throw ValueError(
        "noise floor match: floor below target even at the +20 dB boundary "
        "(" +
        std::to_string(f_hi) + " LUFS vs target " +
        std::to_string(target_lufs) + ")");
  }

  MatchResult r;
  double lo = kLoDb, hi = kHiDb;
  double mid = 0.5 * (lo + hi);
  double val = 0.0;
  for (int it = 0; it < kMaxIter; ++it) {
    mid = 0.5 * (lo + hi);
    val = floor_at(mid);
    r.iterations = it + 1;
    if (std::abs(val - target_lufs) <= kTolLu) break;
    // Non-speech loudness grows monotonically with background gain.
    if (val < target_lufs) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  r.gain_db = mid;
  r.achieved_lufs = val;
  r.matched = mix_with_gain(condition_speech, condition_background, mid);
  return r;
}

audio::Waveform lowpass_anchor(const audio::Waveform& w, double cutoff_hz) {
  if (!(cutoff_hz > 0.0) || cutoff_hz >= 0.5 * w.sample_rate) {
    throw ValueError("low-pass anchor: cutoff " + std::to_string(cutoff_hz) +
                     " Hz out of range for rate " +
                     std::to_string(w.sample_rate));
  }
  // 8th-order Butterworth as four bilinear-transformed biquads. The analog
  // prototype pole pairs have s^2 + 2*sin(pi*(2k+1)/16)*s + 1.
  const double big_k = 1.0 / std::tan(M_PI * cutoff_hz / w.sample_rate);
  std::vector<Biquad> sections;
  for (int k = 0; k < 4; ++k) {
    const double a1k = 2.0 * std::sin(M_PI * (2.0 * k + 1.0) / 16.0);
    const double d0 = big_k * big_k + a1k * big_k + 1.0;
    Biquad q;
    q.b0 = 1.0 / d0;
    q.b1 = 2.0 / d0;
    q.b2 = 1.0 / d0;
    q.a1 = (2.0 - 2.0 * big_k * big_k) / d0;
    q.a2 = (big_k * big_k - a1k * big_k + 1.0) / d0;
    sections.push_back(q);
  }
  return apply_biquads(w, sections);
}

StimulusSet prepare_stimuli(const StimulusItem& item, double target_lufs) {
  require_same_shape(item.mixture, item.clean, "stimuli");
  for (const auto& [name, est] : item.enhanced) {
    require_same_shape(item.mixture, est, ("stimuli condition " + name).c_str());
  }

  StimulusSet set;
  set.report.item_id = item.item_id;

  // Step 1: reference condition = clean + 30 dB attenuated background.
  const audio::Waveform ref_background =
      background_component(item.mixture, item.clean);
  set.reference_condition =
      build_reference_condition(item.clean, ref_background);

  // Step 2: speech activity from the clean reference.
  const ActivityMask mask = speech_activity(item.clean);

  // Step 3: target non-speech loudness from the reference condition.
  const double target_floor =
      measure_masked_loudness(set.reference_condition, mask,
                              MaskKeep::kInactive)
          .lufs;
  set.report.target_nonspeech_lufs = target_floor;

  // Step 4: per-condition iterative matching with the same mask.
  std::map<std::string, audio::Waveform> matched;
  for (const auto& [name, est] : item.enhanced) {
    const audio::Waveform bg = background_component(item.mixture, est);
    try {
      MatchResult m = match_noise_floor(est, bg, mask, target_floor);
      matched[name] = std::move(m.matched);
      set.applied_gains_db[name] = m.gain_db;
    } catch (const ValueError& e) {
      // Clamp to the nearer boundary, keep the condition, flag the item.
      const double lo_floor = measure_masked_loudness(
                                  mix_with_gain(est, bg, -60.0), mask,
                                  MaskKeep::kInactive)
                                  .lufs;
      const double clamped = lo_floor > target_floor ? -60.0 : 20.0;
      matched[name] = mix_with_gain(est, bg, clamped);
      set.applied_gains_db[name] = clamped;
      set.report.flags.push_back("match failed for condition '" + name +
                                 "': " + e.what());
    }
  }

  // Step 5: anchor from the reference condition, then normalize everything
  // to the target loudness (ungated).
  set.anchor = lowpass_anchor(set.reference_condition);

  const auto normalize = [&](const audio::Waveform& w, const std::string& name)
      -> audio::Waveform {
    const double lufs = integrated_loudness(w, /*gated=*/false).lufs;
    if (!std::isfinite(lufs)) {
      set.report.flags.push_back("cannot normalize silent output '" + name +
                                 "'");
      return w;
    }
    return apply_gain(w, std::pow(10.0, (target_lufs - lufs) / 20.0));
  };

  set.reference_condition = normalize(set.reference_condition, "reference");
  set.anchor = normalize(set.anchor, "anchor");
  for (auto& [name, w] : matched) {
    set.conditions[name] = normalize(w, name);
  }

  const auto report_entry = [&](const std::string& name,
                                const audio::Waveform& w, double gain_db) {
    ConditionReport cr;
    cr.gain_db = gain_db;
    cr.nonspeech_lufs =
        measure_masked_loudness(w, mask, MaskKeep::kInactive).lufs;
    cr.final_lufs = integrated_loudness(w, /*gated=*/false).lufs;
    set.report.per_condition[name] = cr;
  };
  report_entry("reference", set.reference_condition, 0.0);
  report_entry("anchor", set.anchor, 0.0);
  for (const auto& [name, w] : set.conditions) {
    report_entry(name, w, set.applied_gains_db.at(name));
  }
  return set;
}

void write_stimulus_set(const std::filesystem::path& out_dir,
                        const StimulusSet& set) {
  namespace fs = std::filesystem;
  const fs::path item_dir = out_dir / set.report.item_id;
  fs::create_directories(item_dir);

  audio::write_wav(item_dir / "reference.wav", set.reference_condition,
                   audio::WavEncoding::kFloat32);
  audio::write_wav(item_dir / "anchor.wav", set.anchor,
                   audio::WavEncoding::kFloat32);
  for (const auto& [name, w] : set.conditions) {
    audio::write_wav(item_dir / (name + ".wav"), w,
                     audio::WavEncoding::kFloat32);
  }

  nlohmann::json j;
  j["item_id"] = set.report.item_id;
  j["target_nonspeech_lufs"] = set.report.target_nonspeech_lufs;
  nlohmann::json per;
  for (const auto& [name, cr] : set.report.per_condition) {
    per[name] = {{"gain_db", cr.gain_db},
                 {"nonspeech_lufs", cr.nonspeech_lufs},
                 {"final_lufs", cr.final_lufs}};
  }
  j["per_condition"] = per;
  j["flags"] = set.report.flags;

  std::ofstream out(item_dir / "report.json");
  if (!out) {
    throw IoError("cannot write " + (item_dir / "report.json").string());
  }
  // Non-finite readings serialize as null.
  out << j.dump(2) << "\n";
}

}  // namespace fdn::loudness
