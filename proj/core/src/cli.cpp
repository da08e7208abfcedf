#include "flowdenoise/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "flowdenoise/audio.hpp"
#include "flowdenoise/errors.hpp"
#include "flowdenoise/features.hpp"
#include "flowdenoise/flow.hpp"
#include "flowdenoise/gradcheck.hpp"
#include "flowdenoise/loudness.hpp"
#include "flowdenoise/rng.hpp"
#include "flowdenoise/train.hpp"

namespace fdn::cli {

namespace {

namespace fs = std::filesystem;

// `key = value` lines for every user-facing option of the parsed subcommand,
// echoed to stdout and saved beside the outputs.
std::string effective_config(const CLI::App* cmd) {
  std::ostringstream out;
  for (const CLI::Option* opt : cmd->get_options()) {
    const std::string name = opt->get_single_name();
    if (name == "help" || name == "config") continue;
    std::string value;
    if (opt->count() > 0) {
      const auto& results = opt->results();
      if (opt->get_expected_min() == 0) {
        value = "true";  // flag present
      } else {
        for (size_t i = 0; i < results.size(); ++i) {
          if (i) value += ",";
          value += results[i];
        }
      }
    } else if (opt->get_expected_min() == 0) {
      value = "false";
    } else {
      value = opt->get_default_str();
    }
    out << name << " = " << value << "\n";
  }
  return out.str();
}

void emit_config(const CLI::App* cmd, const fs::path& out_dir) {
  const std::string text = effective_config(cmd);
  std::cout << "# effective config (" << cmd->get_name() << ")\n" << text;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream f(out_dir / "run_config.txt");
    if (!f) throw IoError("cannot write " + (out_dir / "run_config.txt").string());
    f << text;
  }
}

std::vector<fs::path> collect_wavs(const fs::path& in) {
  std::vector<fs::path> files;
  if (fs::is_directory(in)) {
    for (const auto& entry : fs::directory_iterator(in)) {
      if (entry.path().extension() == ".wav") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
      throw ValueError("no .wav files in directory " + in.string());
    }
  } else {
    files.push_back(in);
  }
  return files;
}

void add_config_option(CLI::App* cmd) {
  // Declared for --help only; run() consumes --config before parsing and
  // splices the file entries in as ordinary arguments.
  cmd->add_option("--config")
      ->description("UTF-8 `key = value` defaults for this subcommand; "
                    "explicit flags win");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_config_flag(const std::string& key, const std::string& value) {
  std::string low;
  for (char c : value) {
    low += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  if (low == "true" || low == "1" || low == "yes" || low == "on") return true;
  if (low == "false" || low == "0" || low == "no" || low == "off") return false;
  throw ValueError("config key '" + key + "' expects a boolean, got '" +
                   value + "'");
}

// Applies a flat `key = value` file to the invoked subcommand by splicing
// synthesized arguments in right after the subcommand name. Only options the
// command line left untouched are filled, so explicit flags win; keys that
// name no option of the subcommand are errors.
std::vector<std::string> expand_config_args(const CLI::App& app,
                                            std::vector<std::string> args) {
  fs::path config_path;
  for (size_t i = 0; i < args.size();) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) {
        throw ValueError("--config expects a file path");
      }
      config_path = args[i + 1];
      args.erase(args.begin() + i, args.begin() + i + 2);
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
      args.erase(args.begin() + i);
    } else {
      ++i;
    }
  }
  if (config_path.empty() || args.empty()) return args;

  const CLI::App* cmd = app.get_subcommand_no_throw(args.front());
  if (cmd == nullptr) return args;  // let the parser report the subcommand

  std::ifstream in(config_path);
  if (!in) throw IoError("cannot read config file " + config_path.string());

  const auto user_set = [&args](const std::string& key) {
    const std::string bare = "--" + key;
    const std::string with_eq = bare + "=";
    for (const std::string& a : args) {
      if (a == bare || a.rfind(with_eq, 0) == 0) return true;
    }
    return false;
  };

  // Later duplicates override earlier ones before anything is injected.
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    const auto eq = text.find('=');
    const std::string key = eq == std::string::npos ? "" : trim(text.substr(0, eq));
    if (key.empty()) {
      throw FormatError("config line " + std::to_string(line_no) +
                        " is not `key = value`: " + text);
    }
    const std::string value = trim(text.substr(eq + 1));
    if (cmd->get_option_no_throw("--" + key) == nullptr) {
      throw ValueError("unknown config key '" + key + "' for subcommand '" +
                       cmd->get_name() + "'");
    }
    auto it = std::find_if(entries.begin(), entries.end(),
                           [&](const auto& e) { return e.first == key; });
    if (it == entries.end()) {
      entries.emplace_back(key, value);
    } else {
      it->second = value;
    }
  }

  std::vector<std::string> injected;
  for (const auto& [key, value] : entries) {
    if (user_set(key)) continue;
    const CLI::Option* opt = cmd->get_option_no_throw("--" + key);
    if (opt->get_expected_min() == 0) {
      if (parse_config_flag(key, value)) injected.push_back("--" + key);
    } else {
      injected.push_back("--" + key);
      injected.push_back(value);
    }
  }
  args.insert(args.begin() + 1, injected.begin(), injected.end());
  return args;
}

// --- train ------------------------------------------------------------

struct TrainArgs {
  train::TrainConfig cfg;
  std::string cond = "time";
  std::string mode = "double";
};

void setup_train(CLI::App& app, TrainArgs& a) {
  CLI::App* cmd = app.add_subcommand(
      "train", "Likelihood-train the flow on a mixing manifest");
  add_config_option(cmd);
  cmd->add_option("--manifest", a.cfg.train_manifest,
                  "training manifest: <clean>\\t<noise>\\t<snr_db>")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--val-manifest", a.cfg.val_manifest, "validation manifest")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--cond", a.cond, "conditional front end")
      ->required()
      ->check(CLI::IsMember({"time", "mel", "apg"}));
  cmd->add_option("--out", a.cfg.out_dir, "output directory")->required();
  cmd->add_option("--blocks", a.cfg.model.n_blocks, "flow blocks")
      ->capture_default_str();
  cmd->add_option("--g", a.cfg.model.g, "subsampling factor")
      ->capture_default_str();
  cmd->add_option("--mode", a.mode, "coupling mode")
      ->check(CLI::IsMember({"single", "double"}))
      ->capture_default_str();
  cmd->add_option("--hidden", a.cfg.model.hidden_channels,
                  "subnet hidden channels")
      ->capture_default_str();
  cmd->add_option("--layers", a.cfg.model.n_layers, "subnet dilated layers")
      ->capture_default_str();
  cmd->add_option("--cond-channels", a.cfg.model.cond_channels,
                  "projected conditional channels")
      ->capture_default_str();
  cmd->add_option("--epochs", a.cfg.epochs, "training epochs")
      ->capture_default_str();
  cmd->add_option("--batch", a.cfg.batch_size, "batch size")
      ->capture_default_str();
  cmd->add_option("--lr", a.cfg.adam.lr, "Adam learning rate")
      ->capture_default_str();
  cmd->add_option("--seed", a.cfg.seed, "run seed")->capture_default_str();

  cmd->callback([cmd, &a] {
    a.cfg.model.mode = flow::mode_from_name(a.mode);
    a.cfg.model.cond_kind = flow::cond_kind_from_name(a.cond);
    emit_config(cmd, a.cfg.out_dir);

    flow::FlowModel<float> probe(a.cfg.model);
    std::cout << "parameters = " << probe.count_parameters() << "\n";

    train::TrainResult res = train::train(a.cfg);
    std::cout << "loss_csv = " << res.csv_path.string() << "\n"
              << "best_checkpoint = " << res.best_checkpoint.string()
              << " (epoch " << res.best_epoch << ", val_nll "
              << res.best_val_nll << ")\n"
              << "last_checkpoint = " << res.last_checkpoint.string() << "\n";
  });
}

// --- enhance ----------------------------------------------------------

struct EnhanceArgs {
  fs::path ckpt;
  fs::path in;
  fs::path out;
  fs::path ref;
  double sigma = 0.9;
  uint64_t seed = 0;
};

void setup_enhance(CLI::App& app, EnhanceArgs& a) {
  CLI::App* cmd = app.add_subcommand(
      "enhance", "Run the inverse flow on noisy WAV files");
  add_config_option(cmd);
  cmd->add_option("--ckpt", a.ckpt, "checkpoint file")
      ->required()
      ->check(CLI::ExistingFile);
  cmd->add_option("--in", a.in, "noisy WAV file or directory")
      ->required()
      ->check(CLI::ExistingPath);
  cmd->add_option("--out", a.out, "output directory")->required();
  cmd->add_option("--sigma", a.sigma, "sampling standard deviation")
      ->capture_default_str();
  cmd->add_option("--seed", a.seed, "run seed")->capture_default_str();
  cmd->add_option("--ref", a.ref, "reference WAV directory for SI-SDR")
      ->check(CLI::ExistingDirectory);

  cmd->callback([cmd, &a] {
    emit_config(cmd, a.out);
    flow::FlowModel<float> model = flow::load_checkpoint<float>(a.ckpt);

    std::ofstream sdr_csv;
    if (!a.ref.empty()) {
      sdr_csv.open(a.out / "si_sdr.csv");
      sdr_csv << "file,si_sdr_db\n";
    }
    uint64_t file_index = 0;
    for (const fs::path& file : collect_wavs(a.in)) {
      const audio::Waveform noisy = audio::read_wav(file);
      const audio::Waveform enhanced = train::enhance(
          model, noisy, a.sigma, Rng::derive(a.seed, file_index++));
      const fs::path out_path = a.out / file.filename();
      audio::write_wav(out_path, enhanced, audio::WavEncoding::kFloat32);
      std::cout << "enhanced " << file.string() << " -> " << out_path.string();
      if (!a.ref.empty()) {
        const audio::Waveform ref = audio::read_wav(a.ref / file.filename());
        const double sdr = train::si_sdr(enhanced, ref);
        std::cout << "  si_sdr_db = " << sdr;
        sdr_csv << file.filename().string() << "," << std::setprecision(10)
                << sdr << "\n";
      }
      std::cout << "\n";
    }
  });
}

// --- featurize --------------------------------------------------------

struct FeaturizeArgs {
  std::string kind;
  fs::path in;
  fs::path out;
  bool log_features = false;
  bool dump_design = false;
};

void setup_featurize(CLI::App& app, FeaturizeArgs& a) {
  CLI::App* cmd = app.add_subcommand(
      "featurize", "Write conditional feature dumps for WAV files");
  add_config_option(cmd);
  cmd->add_option("--kind", a.kind, "front end")
      ->required()
      ->check(CLI::IsMember({"mel", "apg"}));
  cmd->add_option("--in", a.in, "WAV file or directory")
      ->required()
      ->check(CLI::ExistingPath);
  cmd->add_option("--out", a.out, "output directory")->required();
  cmd->add_flag("--log-features", a.log_features,
                "store log(x + 1e-8) instead of raw magnitudes");
  cmd->add_flag("--dump-design", a.dump_design,
                "apg only: also write the filterbank design CSV");

  cmd->callback([cmd, &a] {
    emit_config(cmd, a.out);
    const std::vector<fs::path> files = collect_wavs(a.in);

    if (a.dump_design) {
      if (a.kind != "apg") {
        throw ValueError("--dump-design applies to --kind apg only");
      }
      const audio::Waveform first = audio::read_wav(files.front());
      const feat::ApgFilterbank fb =
          feat::design_apg(feat::ApgConfig{}, first.sample_rate);
      std::ofstream csv(a.out / "apg_design.csv");
      if (!csv) throw IoError("cannot write apg_design.csv");
      csv << "band,center_hz,pole_abs,delay_samples\n";
      for (int b = 0; b < fb.n_bands(); ++b) {
        csv << b << "," << std::setprecision(17) << fb.bands[b].center_freq_hz
            << "," << std::abs(fb.bands[b].pole) << ","
            << fb.bands[b].delay_comp << "\n";
      }
      std::cout << "design_csv = " << (a.out / "apg_design.csv").string()
                << "\n";
    }

    for (const fs::path& file : files) {
      const audio::Waveform w = audio::read_wav(file);
      feat::FeatureMap fm;
      if (a.kind == "mel") {
        fm = feat::mel_spectrogram(feat::MelConfig{}, w);
      } else {
        fm = feat::apg_analyze(feat::design_apg(feat::ApgConfig{},
                                                w.sample_rate),
                               w);
      }
      if (a.log_features) {
        for (size_t i = 0; i < fm.data.size(); ++i) {
          fm.data[i] = std::log(fm.data[i] + 1e-8);
        }
      }
      fs::path out_path = a.out / file.filename();
      out_path.replace_extension(".fdfm");
      feat::write_fdfm(out_path, fm);
      std::cout << "featurized " << file.string() << " -> "
                << out_path.string() << " (" << fm.channels() << "x"
                << fm.frames() << ")\n";
    }
  });
}

// --- prepare-stimuli ----------------------------------------------------

struct StimuliArgs {
  fs::path item_dir;
  fs::path out;
  double target_lufs = -23.0;
};

void setup_prepare_stimuli(CLI::App& app, StimuliArgs& a) {
  CLI::App* cmd = app.add_subcommand(
      "prepare-stimuli",
      "Build normalized listening-test stimuli from one item directory");
  add_config_option(cmd);
  cmd->add_option("--item", a.item_dir,
                  "directory with mixture.wav, clean.wav and sys_*.wav")
      ->required()
      ->check(CLI::ExistingDirectory);
  cmd->add_option("--out", a.out, "output directory")->required();
  cmd->add_option("--target-lufs", a.target_lufs,
                  "final integrated loudness of every output")
      ->capture_default_str();

  cmd->callback([cmd, &a] {
    emit_config(cmd, a.out);
    loudness::StimulusItem item;
    item.item_id = a.item_dir.filename().string();
    item.mixture = audio::read_wav(a.item_dir / "mixture.wav");
    item.clean = audio::read_wav(a.item_dir / "clean.wav");
    for (const auto& entry : fs::directory_iterator(a.item_dir)) {
      const std::string stem = entry.path().stem().string();
      if (entry.path().extension() == ".wav" && stem.rfind("sys_", 0) == 0) {
        item.enhanced[stem] = audio::read_wav(entry.path());
      }
    }
    if (item.enhanced.empty()) {
      throw ValueError("no sys_*.wav conditions in " + a.item_dir.string());
    }

    const loudness::StimulusSet set =
        loudness::prepare_stimuli(item, a.target_lufs);
    loudness::write_stimulus_set(a.out, set);
    std::cout << "item = " << item.item_id << "\n"
              << "target_nonspeech_lufs = "
              << set.report.target_nonspeech_lufs << "\n";
    for (const auto& [name, gain] : set.applied_gains_db) {
      std::cout << "gain_db[" << name << "] = " << gain << "\n";
    }
    for (const std::string& flag : set.report.flags) {
      std::cout << "flag: " << flag << "\n";
    }
  });
}

// --- gradcheck ----------------------------------------------------------

struct GradcheckArgs {
  bool tiny = false;
  uint64_t seed = 0;
  double corrupt = 0.0;
  fs::path out;
};

void setup_gradcheck(CLI::App& app, GradcheckArgs& a) {
  CLI::App* cmd = app.add_subcommand(
      "gradcheck", "Finite-difference check of every tape primitive");
  add_config_option(cmd);
  cmd->add_flag("--tiny", a.tiny, "run the tiny-model suite")->required();
  cmd->add_option("--seed", a.seed, "run seed")->capture_default_str();
  cmd->add_option("--out", a.out, "optional directory for the report");
  cmd->add_option("--corrupt", a.corrupt,
                  "test hook: perturb one gradient by this amount")
      ->group("");

  cmd->callback([cmd, &a] {
    emit_config(cmd, a.out);
    const gradcheck::Report report = gradcheck::run_suite(a.seed, a.corrupt);

    std::ostringstream table;
    table << std::left << std::setw(18) << "primitive" << std::right
          << std::setw(10) << "checked" << std::setw(16) << "max_rel_err"
          << "\n";
    for (const auto& row : report.rows) {
      table << std::left << std::setw(18) << row.name << std::right
            << std::setw(10) << row.n_checked << std::setw(16)
            << std::scientific << std::setprecision(3) << row.max_rel_err
            << "\n";
    }
    table << "max_rel_err = " << std::scientific << std::setprecision(3)
          << report.max_rel_err << " (" << report.worst << ")\n";
    std::cout << table.str();
    if (!a.out.empty()) {
      std::ofstream f(a.out / "gradcheck_report.txt");
      f << table.str();
    }
    if (!report.pass()) {
      throw NumericError("gradient check failed: max relative error " +
                         std::to_string(report.max_rel_err) + " in op '" +
                         report.worst + "'");
    }
  });
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Conditional normalizing-flow speech enhancement toolkit"};
  app.require_subcommand(1);

  TrainArgs train_args;
  EnhanceArgs enhance_args;
  FeaturizeArgs featurize_args;
  StimuliArgs stimuli_args;
  GradcheckArgs gradcheck_args;

  setup_train(app, train_args);
  setup_enhance(app, enhance_args);
  setup_featurize(app, featurize_args);
  setup_prepare_stimuli(app, stimuli_args);
  setup_gradcheck(app, gradcheck_args);

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = expand_config_args(app, std::move(args));
    std::reverse(args.begin(), args.end());  // the vector parser pops the back
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace fdn::cli
