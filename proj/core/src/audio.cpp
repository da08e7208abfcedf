#include "flowdenoise/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "flowdenoise/rng.hpp"

namespace fdn::audio {
namespace {

constexpr uint16_t kFormatPcm = 1;
constexpr uint16_t kFormatFloat = 3;

struct Reader {
  std::ifstream in;

  explicit Reader(const std::filesystem::path& path)
      : in(path, std::ios::binary) {
    if (!in) throw IoError("cannot open " + path.string());
  }

  void bytes(void* dst, size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in.gcount()) != n)
      throw FormatError("truncated WAV file");
  }

  uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    return b[0] | (b[1] << 8) | (b[2] << 16) | (uint32_t(b[3]) << 24);
  }

  uint16_t u16() {
    unsigned char b[2];
    bytes(b, 2);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
  }

  void skip(uint32_t n) { in.seekg(n, std::ios::cur); }

  bool eof_next_chunk() {
    return in.peek() == std::char_traits<char>::eof();
  }
};

void put_u32(std::ofstream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<char*>(b), 4);
}

void put_u16(std::ofstream& out, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8)};
  out.write(reinterpret_cast<char*>(b), 2);
}

float f32_from_bits(uint32_t bits) {
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

uint32_t bits_from_f32(float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  return bits;
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  Reader r(path);

  char tag[4];
  r.bytes(tag, 4);
  if (std::memcmp(tag, "RIFF", 4) != 0) throw FormatError("not a RIFF file");
  r.u32();  // riff size, unreliable in the wild
  r.bytes(tag, 4);
  if (std::memcmp(tag, "WAVE", 4) != 0) throw FormatError("not a WAVE file");

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t sample_rate = 0;
  bool have_fmt = false;
  std::vector<unsigned char> payload;

  while (!r.eof_next_chunk()) {
    r.bytes(tag, 4);
    uint32_t chunk_size = r.u32();
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      if (chunk_size < 16) throw FormatError("fmt chunk too small");
      format = r.u16();
      channels = r.u16();
      sample_rate = r.u32();
      r.u32();  // byte rate
      r.u16();  // block align
      bits = r.u16();
      r.skip(chunk_size - 16 + (chunk_size & 1));
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("data chunk before fmt chunk");
      payload.resize(chunk_size);
      r.bytes(payload.data(), chunk_size);
      break;
    } else {
      r.skip(chunk_size + (chunk_size & 1));
    }
  }
  if (!have_fmt) throw FormatError("missing fmt chunk");
  if (channels == 0 || sample_rate == 0) throw FormatError("bad fmt chunk");

  const bool pcm16 = format == kFormatPcm && bits == 16;
  const bool float32 = format == kFormatFloat && bits == 32;
  if (!pcm16 && !float32)
    throw FormatError("unsupported WAV encoding (format " +
                      std::to_string(format) + ", " + std::to_string(bits) +
                      " bit); expected PCM16 or float32");

  const size_t bytes_per_sample = pcm16 ? 2 : 4;
  const size_t frame_bytes = bytes_per_sample * channels;
  const size_t frames = payload.size() / frame_bytes;

  Waveform w;
  w.sample_rate = static_cast<int>(sample_rate);
  w.samples.resize(frames);
  const unsigned char* p = payload.data();
  for (size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (int c = 0; c < channels; ++c) {
      const unsigned char* s = p + i * frame_bytes + c * bytes_per_sample;
      if (pcm16) {
        int16_t v = static_cast<int16_t>(s[0] | (s[1] << 8));
        acc += v / 32768.0;
      } else {
        uint32_t bits32 = s[0] | (s[1] << 8) | (s[2] << 16) | (uint32_t(s[3]) << 24);
        float f = f32_from_bits(bits32);
        if (!std::isfinite(f)) throw FormatError("non-finite sample in float WAV");
        acc += f;
      }
    }
    w.samples[i] = acc / channels;
  }
  return w;
}

void write_wav(const std::filesystem::path& path, const Waveform& w,
               WavEncoding encoding) {
  if (w.sample_rate <= 0) throw ValueError("sample rate must be positive");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");

  const bool pcm16 = encoding == WavEncoding::kPcm16;
  const uint32_t bytes_per_sample = pcm16 ? 2 : 4;
  const uint32_t data_bytes =
      static_cast<uint32_t>(w.samples.size() * bytes_per_sample);
  // PCM adds nothing beyond the 16-byte fmt chunk; IEEE float also carries a
  // fact chunk per the WAVE spec.
  const uint32_t riff_size = 4 + 8 + 16 + (pcm16 ? 0 : 8 + 4) + 8 + data_bytes;

  out.write("RIFF", 4);
  put_u32(out, riff_size);
  out.write("WAVE", 4);

  out.write("fmt ", 4);
  put_u32(out, 16);
  put_u16(out, pcm16 ? kFormatPcm : kFormatFloat);
  put_u16(out, 1);  // mono
  put_u32(out, static_cast<uint32_t>(w.sample_rate));
  put_u32(out, static_cast<uint32_t>(w.sample_rate) * bytes_per_sample);
  put_u16(out, static_cast<uint16_t>(bytes_per_sample));
  put_u16(out, static_cast<uint16_t>(bytes_per_sample * 8));

  if (!pcm16) {
    out.write("fact", 4);
    put_u32(out, 4);
    put_u32(out, static_cast<uint32_t>(w.samples.size()));
  }

  out.write("data", 4);
  put_u32(out, data_bytes);
  for (double v : w.samples) {
    if (pcm16) {
      double scaled = std::lrint(v * 32768.0);
      scaled = std::clamp(scaled, -32768.0, 32767.0);
      put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(scaled)));
    } else {
      put_u32(out, bits_from_f32(static_cast<float>(v)));
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
}

double mean_power(const Waveform& w) {
  if (w.samples.empty()) return 0.0;
  double acc = 0.0;
  for (double v : w.samples) acc += v * v;
  return acc / static_cast<double>(w.samples.size());
}

MixResult mix_at_snr(const Waveform& clean, const Waveform& noise, SnrSpec spec) {
  if (clean.samples.size() != noise.samples.size())
    throw ShapeError("mix_at_snr: length mismatch");
  if (clean.sample_rate != noise.sample_rate)
    throw ShapeError("mix_at_snr: sample rate mismatch");
  if (!std::isfinite(spec.snr_db)) throw ValueError("mix_at_snr: non-finite SNR");

  const double p_clean = mean_power(clean);
  const double p_noise = mean_power(noise);
  if (p_clean <= 0.0) throw ValueError("mix_at_snr: clean signal has zero energy");
  if (p_noise <= 0.0) throw ValueError("mix_at_snr: noise signal has zero energy");

  const double gain =
      std::sqrt(p_clean / p_noise) * std::pow(10.0, -spec.snr_db / 20.0);

  MixResult out;
  out.scaled_noise.sample_rate = clean.sample_rate;
  out.mixture.sample_rate = clean.sample_rate;
  out.scaled_noise.samples.resize(noise.samples.size());
  out.mixture.samples.resize(clean.samples.size());
  for (size_t i = 0; i < clean.samples.size(); ++i) {
    out.scaled_noise.samples[i] = gain * noise.samples[i];
    out.mixture.samples[i] = clean.samples[i] + out.scaled_noise.samples[i];
  }
  return out;
}

Waveform chunk_random(const Waveform& w, double duration_s, uint64_t rng_seed) {
  const auto want =
      static_cast<size_t>(std::llround(duration_s * w.sample_rate));
  Waveform out;
  out.sample_rate = w.sample_rate;
  out.samples.resize(want, 0.0);
  if (w.samples.size() < want) {
    // Too short: zero-extend so toy corpora with short files still train.
    std::copy(w.samples.begin(), w.samples.end(), out.samples.begin());
    return out;
  }
  Rng rng(rng_seed);
  const auto offset = static_cast<size_t>(
      rng.uniform_int(0, static_cast<int64_t>(w.samples.size() - want)));
  std::copy_n(w.samples.begin() + static_cast<ptrdiff_t>(offset), want,
              out.samples.begin());
  return out;
}

PaddedWaveform pad_to_multiple(const Waveform& w, int g) {
  if (g < 1) throw ValueError("pad_to_multiple: g must be >= 1");
  PaddedWaveform out;
  out.padded = w;
  const int rem = static_cast<int>(w.samples.size() % static_cast<size_t>(g));
  out.pad_len = rem == 0 ? 0 : g - rem;
  out.padded.samples.resize(w.samples.size() + out.pad_len, 0.0);
  return out;
}

std::vector<ManifestItem> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::vector<ManifestItem> items;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    ManifestItem item;
    std::string snr;
    if (!std::getline(ss, item.clean_path, '\t') ||
        !std::getline(ss, item.noise_path, '\t') || !std::getline(ss, snr))
      throw FormatError("manifest line " + std::to_string(lineno) +
                        ": expected <clean>\\t<noise>\\t<snr_db>");
    try {
      item.snr_db = std::stod(snr);
    } catch (const std::exception&) {
      throw FormatError("manifest line " + std::to_string(lineno) +
                        ": bad SNR value '" + snr + "'");
    }
    items.push_back(std::move(item));
  }
  return items;
}

}  // namespace fdn::audio
