#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <vector>

#include <flowdenoise/audio.hpp>
#include <flowdenoise/errors.hpp>

#include "testutil.hpp"

using fdn::audio::Waveform;
namespace audio = fdn::audio;
namespace tu = testutil;

namespace {

// Minimal hand-rolled WAV writer so read_wav is tested against raw bytes we
// control, not against our own write_wav.
void write_raw_wav(const std::filesystem::path& path, int sample_rate,
                   int channels, const std::vector<int16_t>& interleaved) {
  std::ofstream f(path, std::ios::binary);
  auto u32 = [&](uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  auto u16 = [&](uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };
  const uint32_t data_bytes = static_cast<uint32_t>(interleaved.size() * 2);
  f.write("RIFF", 4);
  u32(36 + data_bytes);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  u32(16);
  u16(1);  // PCM
  u16(static_cast<uint16_t>(channels));
  u32(static_cast<uint32_t>(sample_rate));
  u32(static_cast<uint32_t>(sample_rate * channels * 2));
  u16(static_cast<uint16_t>(channels * 2));
  u16(16);
  f.write("data", 4);
  u32(data_bytes);
  f.write(reinterpret_cast<const char*>(interleaved.data()), data_bytes);
}

double measured_snr_db(const Waveform& clean, const Waveform& noise) {
  return 10.0 * std::log10(audio::mean_power(clean) / audio::mean_power(noise));
}

}  // namespace

TEST_CASE("read_wav: 1 s PCM16 silence is 16000 zeros at 16 kHz") {
  auto dir = tu::scratch_dir("audio_silence");
  std::vector<int16_t> raw(16000, 0);
  write_raw_wav(dir / "silence.wav", 16000, 1, raw);

  Waveform w = audio::read_wav(dir / "silence.wav");
  CHECK(w.sample_rate == 16000);
  REQUIRE(w.length() == 16000);
  for (double s : w.samples) CHECK(s == 0.0);
}

TEST_CASE("read_wav: PCM16 -32768 decodes to exactly -1.0") {
  auto dir = tu::scratch_dir("audio_fullscale");
  write_raw_wav(dir / "fs.wav", 16000, 1, {-32768, 32767, 16384});

  Waveform w = audio::read_wav(dir / "fs.wav");
  REQUIRE(w.length() == 3);
  CHECK(w.samples[0] == -1.0);
  CHECK(w.samples[1] == doctest::Approx(32767.0 / 32768.0).epsilon(1e-12));
  CHECK(w.samples[2] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("read_wav: stereo (0.5, -0.5) downmixes to 0.0") {
  auto dir = tu::scratch_dir("audio_stereo");
  // 0.5 = 16384/32768 exactly; interleave L=16384, R=-16384 for 8 frames.
  std::vector<int16_t> raw;
  for (int i = 0; i < 8; ++i) {
    raw.push_back(16384);
    raw.push_back(-16384);
  }
  write_raw_wav(dir / "stereo.wav", 16000, 2, raw);

  Waveform w = audio::read_wav(dir / "stereo.wav");
  REQUIRE(w.length() == 8);
  for (double s : w.samples) CHECK(s == 0.0);
}

TEST_CASE("write_wav: float32 round trip is bit exact") {
  auto dir = tu::scratch_dir("audio_f32");
  Waveform w = tu::white_noise(0.05, 16000, 0.8, 41);
  // Float32 storage quantizes doubles; pre-quantize so the comparison is ==.
  for (double& s : w.samples) s = static_cast<double>(static_cast<float>(s));

  audio::write_wav(dir / "rt.wav", w, audio::WavEncoding::kFloat32);
  Waveform back = audio::read_wav(dir / "rt.wav");
  CHECK(back.sample_rate == w.sample_rate);
  REQUIRE(back.length() == w.length());
  for (size_t i = 0; i < w.length(); ++i) CHECK(back.samples[i] == w.samples[i]);
}

TEST_CASE("write_wav: pcm16 of constant 0.25 reads back within 1/32768") {
  auto dir = tu::scratch_dir("audio_pcm16");
  Waveform w;
  w.sample_rate = 16000;
  w.samples.assign(400, 0.25);

  audio::write_wav(dir / "q.wav", w, audio::WavEncoding::kPcm16);
  Waveform back = audio::read_wav(dir / "q.wav");
  REQUIRE(back.length() == w.length());
  for (double s : back.samples) CHECK(std::abs(s - 0.25) <= 1.0 / 32768.0);
}

TEST_CASE("write_wav: pcm16 clips 1.5 to 32767/32768") {
  auto dir = tu::scratch_dir("audio_clip");
  Waveform w;
  w.sample_rate = 16000;
  w.samples = {1.5, -1.5};

  audio::write_wav(dir / "clip.wav", w, audio::WavEncoding::kPcm16);
  Waveform back = audio::read_wav(dir / "clip.wav");
  REQUIRE(back.length() == 2);
  CHECK(back.samples[0] == 32767.0 / 32768.0);
  CHECK(back.samples[1] == -1.0);
}

TEST_CASE("round trips preserve length and sample rate at several rates") {
  auto dir = tu::scratch_dir("audio_rates");
  for (int rate : {8000, 16000, 48000}) {
    Waveform w = tu::white_noise(0.01, rate, 0.5, 7);
    auto p = dir / ("r" + std::to_string(rate) + ".wav");
    audio::write_wav(p, w, audio::WavEncoding::kFloat32);
    Waveform back = audio::read_wav(p);
    CHECK(back.sample_rate == rate);
    CHECK(back.length() == w.length());
  }
}

TEST_CASE("read_wav: malformed header is a format error") {
  auto dir = tu::scratch_dir("audio_bad");
  {
    std::ofstream f(dir / "bad.wav", std::ios::binary);
    f << "not a riff file at all";
  }
  CHECK_THROWS_AS(audio::read_wav(dir / "bad.wav"), fdn::FormatError);
  CHECK_THROWS_AS(audio::read_wav(dir / "missing.wav"), fdn::Error);
}

TEST_CASE("mix_at_snr: unit-power pair at 0 dB has gain 1") {
  Waveform clean = tu::sine(440.0, 0.5, 16000, std::sqrt(2.0));  // unit power
  Waveform noise = tu::sine(1234.0, 0.5, 16000, std::sqrt(2.0));

  auto mix = audio::mix_at_snr(clean, noise, audio::SnrSpec{0.0});
  REQUIRE(mix.scaled_noise.length() == noise.length());
  for (size_t i = 0; i < noise.length(); ++i) {
    CHECK(mix.scaled_noise.samples[i] ==
          doctest::Approx(noise.samples[i]).epsilon(1e-9));
    CHECK(mix.mixture.samples[i] ==
          doctest::Approx(clean.samples[i] + noise.samples[i]).epsilon(1e-9));
  }
}

TEST_CASE("mix_at_snr: 20 dB with unit-power signals gives gain 0.1") {
  Waveform clean = tu::sine(440.0, 0.25, 16000, std::sqrt(2.0));
  // 976 Hz: 0.25 s spans exactly 244 periods, so discrete power is A^2/2.
  Waveform noise = tu::sine(976.0, 0.25, 16000, std::sqrt(2.0));

  auto mix = audio::mix_at_snr(clean, noise, audio::SnrSpec{20.0});
  for (size_t i = 0; i < noise.length(); ++i) {
    CHECK(mix.scaled_noise.samples[i] ==
          doctest::Approx(0.1 * noise.samples[i]).epsilon(1e-6));
  }
}

TEST_CASE("mix_at_snr: measured SNR reproduces the request to 1e-9 dB") {
  Waveform clean = tu::toy_speech(0.5, 16000, 3);
  Waveform noise = tu::white_noise(0.5, 16000, 0.3, 11);
  for (double snr : {-5.0, 0.0, 7.5, 10.0, 30.0}) {
    auto mix = audio::mix_at_snr(clean, noise, audio::SnrSpec{snr});
    CHECK(std::abs(measured_snr_db(clean, mix.scaled_noise) - snr) < 1e-9);
  }
}

TEST_CASE("mix_at_snr: degenerate and mismatched inputs throw") {
  Waveform clean = tu::sine(440.0, 0.1, 16000, 0.5);
  Waveform zeros;
  zeros.sample_rate = 16000;
  zeros.samples.assign(clean.length(), 0.0);
  CHECK_THROWS_AS(audio::mix_at_snr(clean, zeros, audio::SnrSpec{0.0}),
                  fdn::ValueError);

  Waveform shorter = tu::sine(440.0, 0.05, 16000, 0.5);
  CHECK_THROWS_AS(audio::mix_at_snr(clean, shorter, audio::SnrSpec{0.0}),
                  fdn::ShapeError);
}

TEST_CASE("chunk_random: 16000 samples at 1 s returns the whole signal") {
  Waveform w = tu::white_noise(1.0, 16000, 0.5, 5);
  REQUIRE(w.length() == 16000);
  for (uint64_t seed : {1ull, 2ull, 99ull}) {
    Waveform c = audio::chunk_random(w, 1.0, seed);
    REQUIRE(c.length() == 16000);
    CHECK(tu::max_abs_diff(c.samples, w.samples) == 0.0);
  }
}

TEST_CASE("chunk_random: same seed gives identical chunks") {
  Waveform w = tu::white_noise(2.0, 16000, 0.5, 6);
  Waveform a = audio::chunk_random(w, 1.0, 1234);
  Waveform b = audio::chunk_random(w, 1.0, 1234);
  REQUIRE(a.length() == b.length());
  CHECK(tu::max_abs_diff(a.samples, b.samples) == 0.0);
}

TEST_CASE("chunk_random: offsets over seeds are approximately uniform") {
  // 32000-sample input, 1 s chunks: valid offsets are [0, 16000]. Encode the
  // offset in the signal (w[i] = i) so each chunk's first sample recovers it.
  Waveform w;
  w.sample_rate = 16000;
  w.samples.resize(32000);
  std::iota(w.samples.begin(), w.samples.end(), 0.0);

  const int kSeeds = 1000;
  const int kBins = 8;  // [0,16000] split into 8 equal bins (last bin closed)
  std::vector<int> hist(kBins, 0);
  for (int seed = 0; seed < kSeeds; ++seed) {
    Waveform c = audio::chunk_random(w, 1.0, static_cast<uint64_t>(seed));
    REQUIRE(c.length() == 16000);
    const double off = c.samples[0];
    REQUIRE(off >= 0.0);
    REQUIRE(off <= 16000.0);
    // Chunk must be contiguous.
    CHECK(c.samples[16000 - 1] == off + 15999.0);
    int bin = std::min(kBins - 1, static_cast<int>(off / (16001.0 / kBins)));
    ++hist[bin];
  }
  // Chi-square against uniform: 7 dof, 99.9% critical value 24.32.
  const double expected = static_cast<double>(kSeeds) / kBins;
  double chi2 = 0.0;
  for (int c : hist) {
    const double d = c - expected;
    chi2 += d * d / expected;
  }
  CHECK(chi2 < 24.32);
  // Both boundary offsets must be reachable in principle: check the observed
  // range spans most of [0, 16000].
  CHECK(hist.front() > 0);
  CHECK(hist.back() > 0);
}

TEST_CASE("chunk_random: short signals are zero-extended") {
  Waveform w = tu::white_noise(0.5, 16000, 0.5, 9);  // 8000 samples
  Waveform c = audio::chunk_random(w, 1.0, 7);
  REQUIRE(c.length() == 16000);
  CHECK(tu::max_abs_diff(std::vector<double>(c.samples.begin(),
                                             c.samples.begin() + 8000),
                         w.samples) == 0.0);
  for (size_t i = 8000; i < 16000; ++i) CHECK(c.samples[i] == 0.0);
}

TEST_CASE("pad_to_multiple: N=24 g=12 pads nothing") {
  Waveform w;
  w.sample_rate = 16000;
  w.samples.assign(24, 0.5);
  auto p = audio::pad_to_multiple(w, 12);
  CHECK(p.pad_len == 0);
  CHECK(p.padded.length() == 24);
}

TEST_CASE("pad_to_multiple: N=25 g=12 pads 11 zeros to length 36") {
  Waveform w;
  w.sample_rate = 16000;
  w.samples.assign(25, 0.5);
  auto p = audio::pad_to_multiple(w, 12);
  CHECK(p.pad_len == 11);
  REQUIRE(p.padded.length() == 36);
  for (size_t i = 0; i < 25; ++i) CHECK(p.padded.samples[i] == 0.5);
  for (size_t i = 25; i < 36; ++i) CHECK(p.padded.samples[i] == 0.0);
}

TEST_CASE("read_manifest: parses tab-separated clean/noise/snr lines") {
  auto dir = tu::scratch_dir("audio_manifest");
  {
    std::ofstream f(dir / "m.tsv");
    f << "a/clean1.wav\tb/noise1.wav\t0\n";
    f << "a/clean2.wav\tb/noise2.wav\t7.5\n";
    f << "a/clean3.wav\tb/noise3.wav\t-5\n";
  }
  auto items = audio::read_manifest(dir / "m.tsv");
  REQUIRE(items.size() == 3);
  CHECK(items[0].clean_path == "a/clean1.wav");
  CHECK(items[0].noise_path == "b/noise1.wav");
  CHECK(items[0].snr_db == 0.0);
  CHECK(items[1].snr_db == 7.5);
  CHECK(items[2].snr_db == -5.0);

  {
    std::ofstream f(dir / "bad.tsv");
    f << "only_one_field\n";
  }
  CHECK_THROWS_AS(audio::read_manifest(dir / "bad.tsv"), fdn::Error);
}
