#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "flowdenoise/audio.hpp"

namespace fdn::loudness {

// Second-order section, a0 normalized to 1. Applied in transposed direct
// form II with zero initial state.
struct Biquad {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0;
  double a1 = 0.0, a2 = 0.0;
};

audio::Waveform apply_biquads(const audio::Waveform& w,
                              const std::vector<Biquad>& sections);

// K-weighting pre-filter pair: high shelf (+4 dB above ~1.5 kHz) followed by
// a ~38 Hz high pass. Coefficients are produced for the requested rate by
// bilinear transform of fixed analog prototypes; at 48 kHz the result equals
// the loudness standard's tabulated coefficients to double rounding.
struct KWeighting {
  Biquad shelf;
  Biquad highpass;
};

// Supported rates: 48000 and 16000. Anything else is an error.
KWeighting design_k_weighting(int sample_rate);

audio::Waveform k_weight(const audio::Waveform& w);

struct LoudnessReading {
  double lufs = 0.0;  // -inf sentinel when nothing survives gating
  bool gated = false;
};

// Integrated loudness over 400 ms blocks with 75% overlap,
// -0.691 + 10*log10(mean block power). Gated mode applies the -70 LKFS
// absolute gate and then the -10 LU relative gate. Input must be >= 400 ms.
LoudnessReading integrated_loudness(const audio::Waveform& w, bool gated);

// Per-sample speech/non-speech decision aligned with the reference clean
// signal it was derived from.
struct ActivityMask {
  std::vector<uint8_t> active;
  size_t length() const { return active.size(); }
};

struct ActivityConfig {
  double window_s = 0.02;      // RMS envelope window
  double hop_s = 0.01;         // envelope hop, held per sample
  double threshold_db = -40.0; // relative to the peak envelope
  double close_gap_s = 0.10;   // fill inactive gaps shorter than this
  double open_island_s = 0.05; // drop active islands shorter than this
};

// Envelope threshold followed by morphological closing then opening.
// Silent input yields an all-inactive mask.
ActivityMask speech_activity(const audio::Waveform& clean,
                             const ActivityConfig& cfg = {});

enum class MaskKeep { kActive, kInactive };

// Concatenates the selected samples and measures ungated loudness. The
// selected part must cover at least 400 ms.
LoudnessReading measure_masked_loudness(const audio::Waveform& w,
                                        const ActivityMask& mask,
                                        MaskKeep keep);

// mixture - estimate, sample-wise.
audio::Waveform background_component(const audio::Waveform& mixture,
                                     const audio::Waveform& estimate);

// clean + background attenuated by 30 dB.
audio::Waveform build_reference_condition(const audio::Waveform& clean,
                                          const audio::Waveform& background);

struct MatchResult {
  double gain_db = 0.0;
  audio::Waveform matched;
  double achieved_lufs = 0.0;
  int iterations = 0;
};

// Bisection over gain_db in [-60, +20] applied to condition_background so
// that the masked (inactive) ungated loudness of
// condition_speech + gain * condition_background lands within 0.1 LU of
// target_lufs. At most 40 iterations; an unreachable target is an error
// naming the violated boundary.
MatchResult match_noise_floor(const audio::Waveform& condition_speech,
                              const audio::Waveform& condition_background,
                              const ActivityMask& mask, double target_lufs);

// 8th-order Butterworth low pass (four bilinear-transformed biquads).
audio::Waveform lowpass_anchor(const audio::Waveform& w,
                               double cutoff_hz = 3500.0);

// One listening-test item: the noisy mixture, the clean reference, and the
// per-system enhanced outputs keyed by condition name.
struct StimulusItem {
  std::string item_id;
  audio::Waveform mixture;
  audio::Waveform clean;
  std::map<std::string, audio::Waveform> enhanced;
};

struct ConditionReport {
  double gain_db = 0.0;        // background gain found by matching
  double nonspeech_lufs = 0.0; // non-speech floor of the final output
  double final_lufs = 0.0;     // ungated loudness of the final output
};

struct StimulusReport {
  std::string item_id;
  double target_nonspeech_lufs = 0.0;
  std::map<std::string, ConditionReport> per_condition;
  std::vector<std::string> flags;
};

struct StimulusSet {
  audio::Waveform reference_condition;
  audio::Waveform anchor;
  std::map<std::string, audio::Waveform> conditions;
  std::map<std::string, double> applied_gains_db;
  StimulusReport report;
};

// Full stimulus preparation: reference condition from the 30 dB attenuated
// background, activity mask from the clean reference, per-condition noise
// floor matching against the reference's non-speech loudness, low-passed
// anchor, and final normalization of every output to target_lufs (ungated).
// Conditions whose floors cannot be matched are clamped to the nearer
// boundary gain and flagged in the report.
StimulusSet prepare_stimuli(const StimulusItem& item,
                            double target_lufs = -23.0);

// Writes <out_dir>/<item_id>/{reference.wav, anchor.wav, <condition>.wav}
// as float32 plus report.json.
void write_stimulus_set(const std::filesystem::path& out_dir,
                        const StimulusSet& set);

}  // namespace fdn::loudness
