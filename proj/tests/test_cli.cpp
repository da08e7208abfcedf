#include <doctest.h>
#include <json.hpp>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "flowdenoise/audio.hpp"
#include "flowdenoise/features.hpp"
#include "testutil.hpp"

using namespace fdn;
namespace tu = testutil;
namespace fs = std::filesystem;

namespace {

// The tool under test, injected by the build.
constexpr const char* kCli = FLOWDENOISE_CLI_PATH;

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd =
      std::string(kCli) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

// Extracts the integer after "parameters = " in a train log.
uint64_t parse_param_count(const std::string& log) {
  const auto pos = log.find("parameters = ");
  REQUIRE(pos != std::string::npos);
  return std::stoull(log.substr(pos + 13));
}

std::string tiny_train_args(const fs::path& manifest, const fs::path& out,
                            const std::string& mode, int epochs) {
  std::ostringstream ss;
  ss << "train --manifest " << manifest.string() << " --val-manifest "
     << manifest.string() << " --cond time --out " << out.string()
     << " --blocks 2 --g 4 --mode " << mode
     << " --hidden 16 --layers 3 --cond-channels 8 --epochs " << epochs
     << " --batch 2 --seed 3";
  return ss.str();
}

}  // namespace

TEST_CASE("cli: no subcommand or unknown subcommand fails") {
  auto dir = tu::scratch_dir("cli_basic");
  CHECK(run_cli("", dir / "a.log") != 0);
  CHECK(run_cli("frobnicate", dir / "b.log") != 0);
}

TEST_CASE("cli: train writes config echo, loss csv and checkpoints") {
  auto dir = tu::scratch_dir("cli_train");
  tu::ToyDataset data = tu::make_toy_dataset(dir / "data", 4, 0.3, 16000, 17);
  const fs::path out = dir / "run";

  const int rc = run_cli(tiny_train_args(data.manifest, out, "double", 2),
                         dir / "train.log");
  const std::string log = slurp(dir / "train.log");
  INFO(log);
  REQUIRE(rc == 0);

  CHECK(contains(log, "# effective config (train)"));
  CHECK(contains(log, "parameters = "));
  CHECK(contains(log, "best_checkpoint = "));

  // Echoed config is also saved beside the outputs, flags and defaults both.
  const std::string cfg = slurp(out / "run_config.txt");
  CHECK(contains(cfg, "epochs = 2"));
  CHECK(contains(cfg, "mode = double"));
  CHECK(contains(cfg, "lr = "));  // default, not passed on the command line

  // Pre-training row plus one row per epoch.
  const std::string csv = slurp(out / "loss.csv");
  CHECK(contains(csv, "epoch,train_nll,val_nll,lr"));
  CHECK(count_lines(csv) == 4);

  CHECK(fs::exists(out / "best.fdck"));
  CHECK(fs::exists(out / "last.fdck"));
}

TEST_CASE("cli: train rejects a missing manifest") {
  auto dir = tu::scratch_dir("cli_train_bad");
  const int rc = run_cli(
      tiny_train_args(dir / "absent.tsv", dir / "run", "double", 1),
      dir / "log");
  CHECK(rc != 0);
}

TEST_CASE("cli: reported parameter count doubles with the coupling mode") {
  auto dir = tu::scratch_dir("cli_params");
  tu::ToyDataset data = tu::make_toy_dataset(dir / "data", 2, 0.3, 16000, 19);

  REQUIRE(run_cli(tiny_train_args(data.manifest, dir / "s", "single", 1),
                  dir / "s.log") == 0);
  REQUIRE(run_cli(tiny_train_args(data.manifest, dir / "d", "double", 1),
                  dir / "d.log") == 0);

  const double single = static_cast<double>(parse_param_count(slurp(dir / "s.log")));
  const double dbl = static_cast<double>(parse_param_count(slurp(dir / "d.log")));
  const double ratio = dbl / single;
  CHECK(ratio > 1.8);
  CHECK(ratio < 2.2);
}

TEST_CASE("cli: enhance preserves names and lengths, seeds are honored") {
  auto dir = tu::scratch_dir("cli_enhance");
  tu::ToyDataset data = tu::make_toy_dataset(dir / "data", 4, 0.3, 16000, 23);
  const fs::path run = dir / "run";
  REQUIRE(run_cli(tiny_train_args(data.manifest, run, "double", 1),
                  dir / "train.log") == 0);
  const fs::path ckpt = run / "last.fdck";

  // Three noisy inputs with deliberately ragged lengths.
  const fs::path noisy_dir = dir / "noisy";
  fs::create_directories(noisy_dir);
  const std::vector<size_t> lengths = {8000, 8003, 8004};
  for (size_t i = 0; i < lengths.size(); ++i) {
    audio::Waveform w = tu::toy_speech(1.0, 16000, 100 + i);
    w.samples.resize(lengths[i]);
    audio::write_wav(noisy_dir / ("n" + std::to_string(i) + ".wav"), w,
                     audio::WavEncoding::kFloat32);
  }

  const fs::path out_a = dir / "enh_a";
  const int rc = run_cli("enhance --ckpt " + ckpt.string() + " --in " +
                             noisy_dir.string() + " --out " + out_a.string() +
                             " --sigma 0.5 --seed 9",
                         dir / "enh_a.log");
  INFO(slurp(dir / "enh_a.log"));
  REQUIRE(rc == 0);

  for (size_t i = 0; i < lengths.size(); ++i) {
    const fs::path f = out_a / ("n" + std::to_string(i) + ".wav");
    REQUIRE(fs::exists(f));
    audio::Waveform w = audio::read_wav(f);
    CHECK(w.length() == lengths[i]);
    CHECK(w.sample_rate == 16000);
  }
  CHECK(contains(slurp(out_a / "run_config.txt"), "sigma = 0.5"));

  // Same seed reproduces the output bytes; a different seed does not.
  const fs::path out_b = dir / "enh_b";
  REQUIRE(run_cli("enhance --ckpt " + ckpt.string() + " --in " +
                      noisy_dir.string() + " --out " + out_b.string() +
                      " --sigma 0.5 --seed 9",
                  dir / "enh_b.log") == 0);
  const fs::path out_c = dir / "enh_c";
  REQUIRE(run_cli("enhance --ckpt " + ckpt.string() + " --in " +
                      noisy_dir.string() + " --out " + out_c.string() +
                      " --sigma 0.5 --seed 10",
                  dir / "enh_c.log") == 0);
  CHECK(slurp(out_a / "n0.wav") == slurp(out_b / "n0.wav"));
  CHECK(slurp(out_a / "n0.wav") != slurp(out_c / "n0.wav"));

  // Default sigma is echoed when not overridden.
  const fs::path out_d = dir / "enh_d";
  REQUIRE(run_cli("enhance --ckpt " + ckpt.string() + " --in " +
                      (noisy_dir / "n0.wav").string() + " --out " +
                      out_d.string() + " --seed 1",
                  dir / "enh_d.log") == 0);
  CHECK(contains(slurp(out_d / "run_config.txt"), "sigma = 0.9"));
}

TEST_CASE("cli: enhance with a reference directory writes an SI-SDR table") {
  auto dir = tu::scratch_dir("cli_enhance_ref");
  tu::ToyDataset data = tu::make_toy_dataset(dir / "data", 2, 0.3, 16000, 29);
  const fs::path run = dir / "run";
  REQUIRE(run_cli(tiny_train_args(data.manifest, run, "double", 1),
                  dir / "train.log") == 0);

  const fs::path noisy_dir = dir / "noisy";
  const fs::path ref_dir = dir / "ref";
  fs::create_directories(noisy_dir);
  fs::create_directories(ref_dir);
  for (int i = 0; i < 2; ++i) {
    audio::Waveform clean = tu::toy_speech(0.5, 16000, 200 + i);
    audio::Waveform noise = tu::white_noise(0.5, 16000, 0.05, 300 + i);
    audio::Waveform noisy = clean;
    for (size_t k = 0; k < noisy.samples.size(); ++k) {
      noisy.samples[k] += noise.samples[k];
    }
    const std::string name = "u" + std::to_string(i) + ".wav";
    audio::write_wav(noisy_dir / name, noisy, audio::WavEncoding::kFloat32);
    audio::write_wav(ref_dir / name, clean, audio::WavEncoding::kFloat32);
  }

  const fs::path out = dir / "enh";
  REQUIRE(run_cli("enhance --ckpt " + (run / "last.fdck").string() + " --in " +
                      noisy_dir.string() + " --out " + out.string() +
                      " --seed 4 --ref " + ref_dir.string(),
                  dir / "enh.log") == 0);

  const std::string csv = slurp(out / "si_sdr.csv");
  CHECK(contains(csv, "file,si_sdr_db"));
  CHECK(count_lines(csv) == 3);
  CHECK(contains(csv, "u0.wav,"));
  CHECK(contains(csv, "u1.wav,"));
}

TEST_CASE("cli: featurize mel matches the library output") {
  auto dir = tu::scratch_dir("cli_feat_mel");
  audio::Waveform w = tu::toy_speech(1.0, 16000, 51);
  const fs::path wav = dir / "clip.wav";
  audio::write_wav(wav, w, audio::WavEncoding::kFloat32);

  const fs::path out = dir / "feat";
  const int rc = run_cli(
      "featurize --kind mel --in " + wav.string() + " --out " + out.string(),
      dir / "log");
  INFO(slurp(dir / "log"));
  REQUIRE(rc == 0);
  CHECK(contains(slurp(dir / "log"), "(80x122)"));

  feat::FeatureMap fm = feat::read_fdfm(out / "clip.fdfm");
  CHECK(fm.kind == feat::FeatureKind::kMel);
  CHECK(fm.channels() == 80);
  CHECK(fm.frames() == 122);

  // The dump equals the library features after one float32 quantization.
  feat::FeatureMap local =
      feat::mel_spectrogram(feat::MelConfig{}, audio::read_wav(wav));
  REQUIRE(local.data.size() == fm.data.size());
  for (size_t i = 0; i < fm.data.size(); ++i) {
    CHECK(fm.data[i] ==
          static_cast<double>(static_cast<float>(local.data[i])));
  }
}

TEST_CASE("cli: featurize apg with log features and the design dump") {
  auto dir = tu::scratch_dir("cli_feat_apg");
  audio::Waveform w = tu::toy_speech(0.5, 16000, 52);
  const fs::path wav = dir / "clip.wav";
  audio::write_wav(wav, w, audio::WavEncoding::kFloat32);

  const fs::path out = dir / "feat";
  const int rc = run_cli("featurize --kind apg --in " + wav.string() +
                             " --out " + out.string() +
                             " --log-features --dump-design",
                         dir / "log");
  INFO(slurp(dir / "log"));
  REQUIRE(rc == 0);

  feat::FeatureMap fm = feat::read_fdfm(out / "clip.fdfm");
  CHECK(fm.kind == feat::FeatureKind::kApg);
  CHECK(fm.channels() == 80);
  CHECK(fm.frames() == 8000);  // per-sample envelope frames

  audio::Waveform back = audio::read_wav(wav);
  feat::FeatureMap local = feat::apg_analyze(
      feat::design_apg(feat::ApgConfig{}, back.sample_rate), back);
  for (size_t i = 0; i < fm.data.size(); ++i) {
    const double expect = static_cast<double>(
        static_cast<float>(std::log(local.data[i] + 1e-8)));
    CHECK(fm.data[i] == expect);
  }

  // Design CSV: header plus one row per band, band 0 centered at 40 Hz.
  const std::string csv = slurp(out / "apg_design.csv");
  CHECK(contains(csv, "band,center_hz,pole_abs,delay_samples"));
  CHECK(count_lines(csv) == 81);
  std::istringstream ss(csv);
  std::string header, first;
  std::getline(ss, header);
  std::getline(ss, first);
  CHECK(first.rfind("0,40,", 0) == 0);

  // The design dump applies to the filterbank front end only.
  CHECK(run_cli("featurize --kind mel --in " + wav.string() + " --out " +
                    (dir / "feat2").string() + " --dump-design",
                dir / "log2") != 0);
}

TEST_CASE("cli: prepare-stimuli end to end and failure cases") {
  auto dir = tu::scratch_dir("cli_stimuli");

  // Item directory: clean tone bursts plus a noisy mixture and one system.
  const fs::path item = dir / "item3";
  fs::create_directories(item);
  audio::Waveform clean;
  clean.sample_rate = 16000;
  for (int r = 0; r < 3; ++r) {
    for (int i = 0; i < 8000; ++i) {
      clean.samples.push_back(0.3 * std::sin(2.0 * M_PI * 440.0 * i / 16000));
    }
    clean.samples.insert(clean.samples.end(), 8000, 0.0);
  }
  audio::Waveform noise = tu::white_noise(3.0, 16000, 0.03, 61);
  audio::Waveform mixture = clean;
  for (size_t i = 0; i < mixture.samples.size(); ++i) {
    mixture.samples[i] += noise.samples[i];
  }
  audio::write_wav(item / "clean.wav", clean, audio::WavEncoding::kFloat32);
  audio::write_wav(item / "mixture.wav", mixture, audio::WavEncoding::kFloat32);
  audio::write_wav(item / "sys_a.wav", clean, audio::WavEncoding::kFloat32);

  const fs::path out = dir / "stim";
  const int rc = run_cli(
      "prepare-stimuli --item " + item.string() + " --out " + out.string(),
      dir / "log");
  const std::string log = slurp(dir / "log");
  INFO(log);
  REQUIRE(rc == 0);
  CHECK(contains(log, "item = item3"));
  CHECK(contains(log, "gain_db[sys_a] = "));

  REQUIRE(fs::exists(out / "item3" / "reference.wav"));
  REQUIRE(fs::exists(out / "item3" / "anchor.wav"));
  REQUIRE(fs::exists(out / "item3" / "sys_a.wav"));
  REQUIRE(fs::exists(out / "item3" / "report.json"));

  std::ifstream jin(out / "item3" / "report.json");
  nlohmann::json j = nlohmann::json::parse(jin);
  CHECK(j["item_id"] == "item3");
  REQUIRE(j["per_condition"].contains("sys_a"));
  CHECK(std::abs(j["per_condition"]["sys_a"]["final_lufs"].get<double>() -
                 -23.0) < 0.15);

  // Missing clean.wav and missing system conditions both fail cleanly.
  const fs::path broken = dir / "broken";
  fs::create_directories(broken);
  audio::write_wav(broken / "mixture.wav", mixture,
                   audio::WavEncoding::kFloat32);
  audio::write_wav(broken / "sys_a.wav", clean, audio::WavEncoding::kFloat32);
  CHECK(run_cli("prepare-stimuli --item " + broken.string() + " --out " +
                    (dir / "o2").string(),
                dir / "log2") != 0);

  const fs::path nosys = dir / "nosys";
  fs::create_directories(nosys);
  audio::write_wav(nosys / "clean.wav", clean, audio::WavEncoding::kFloat32);
  audio::write_wav(nosys / "mixture.wav", mixture,
                   audio::WavEncoding::kFloat32);
  CHECK(run_cli("prepare-stimuli --item " + nosys.string() + " --out " +
                    (dir / "o3").string(),
                dir / "log3") != 0);
}

TEST_CASE("cli: gradcheck passes clean and fails when corrupted") {
  auto dir = tu::scratch_dir("cli_gradcheck");

  const int rc = run_cli("gradcheck --tiny --seed 5 --out " +
                             (dir / "rep").string(),
                         dir / "log");
  const std::string log = slurp(dir / "log");
  INFO(log);
  REQUIRE(rc == 0);
  CHECK(contains(log, "flow_nll"));
  CHECK(contains(log, "max_rel_err = "));
  CHECK(fs::exists(dir / "rep" / "gradcheck_report.txt"));

  // The hidden corruption hook must trip the gate with a nonzero exit.
  CHECK(run_cli("gradcheck --tiny --corrupt 0.5", dir / "log2") == 1);

  // --tiny is required.
  CHECK(run_cli("gradcheck", dir / "log3") != 0);
}

TEST_CASE("cli: config file, flag precedence and unknown keys") {
  auto dir = tu::scratch_dir("cli_config");
  audio::Waveform w = tu::toy_speech(1.0, 16000, 53);
  const fs::path wav = dir / "clip.wav";
  audio::write_wav(wav, w, audio::WavEncoding::kFloat32);

  const fs::path cfg = dir / "run.cfg";
  {
    std::ofstream f(cfg);
    f << "kind = mel\n"
      << "in = " << wav.string() << "\n"
      << "out = " << (dir / "feat1").string() << "\n";
  }

  // Values come from the file alone.
  REQUIRE(run_cli("featurize --config " + cfg.string(), dir / "log1") == 0);
  feat::FeatureMap a = feat::read_fdfm(dir / "feat1" / "clip.fdfm");
  CHECK(a.kind == feat::FeatureKind::kMel);
  CHECK(contains(slurp(dir / "log1"), "kind = mel"));

  // A command-line flag overrides the file entry.
  REQUIRE(run_cli("featurize --config " + cfg.string() +
                      " --kind apg --out " + (dir / "feat2").string(),
                  dir / "log2") == 0);
  feat::FeatureMap b = feat::read_fdfm(dir / "feat2" / "clip.fdfm");
  CHECK(b.kind == feat::FeatureKind::kApg);
  CHECK(contains(slurp(dir / "log2"), "kind = apg"));

  // Unknown keys are rejected, not ignored.
  const fs::path bad = dir / "bad.cfg";
  {
    std::ofstream f(bad);
    f << "kind = mel\n"
      << "in = " << wav.string() << "\n"
      << "out = " << (dir / "feat3").string() << "\n"
      << "bogus_key = 1\n";
  }
  CHECK(run_cli("featurize --config " + bad.string(), dir / "log3") != 0);
}
