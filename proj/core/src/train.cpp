#include "flowdenoise/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "flowdenoise/autodiff.hpp"
#include "flowdenoise/errors.hpp"
#include "flowdenoise/rng.hpp"

namespace fdn::train {

// ---------------------------------------------------------------------------
// Adam

template <typename T>
void adam_step(OptimState<T>& state, std::vector<Tensor<T>*> params,
               const std::vector<Tensor<T>>& grads) {
  if (params.size() != grads.size())
    throw ShapeError("adam: parameter/gradient count mismatch");
  for (size_t i = 0; i < grads.size(); ++i) {
    if (!params[i]->same_shape(grads[i]))
      throw ShapeError("adam: shape mismatch at parameter " +
                       std::to_string(i));
    if (!grads[i].all_finite())
      throw NumericError("adam: non-finite gradient at parameter " +
                         std::to_string(i) + "; step aborted");
  }
  if (state.m1.empty()) {
    state.m1.reserve(params.size());
    state.m2.reserve(params.size());
    for (const auto* p : params) {
      state.m1.emplace_back(p->rows(), p->cols());
      state.m2.emplace_back(p->rows(), p->cols());
    }
  }
  if (state.m1.size() != params.size())
    throw ShapeError("adam: state does not match parameter count");

  state.step += 1;
  const double b1 = state.cfg.beta1;
  const double b2 = state.cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    Tensor<T>& m1 = state.m1[i];
    Tensor<T>& m2 = state.m2[i];
    const Tensor<T>& g = grads[i];
    for (size_t k = 0; k < p.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      const double m1k = b1 * static_cast<double>(m1[k]) + (1.0 - b1) * gk;
      const double m2k = b2 * static_cast<double>(m2[k]) + (1.0 - b2) * gk * gk;
      m1[k] = static_cast<T>(m1k);
      m2[k] = static_cast<T>(m2k);
      const double update =
          state.cfg.lr * (m1k / bc1) / (std::sqrt(m2k / bc2) + state.cfg.eps);
      p[k] = static_cast<T>(static_cast<double>(p[k]) - update);
    }
  }
}

template <typename T>
void adam_step(OptimState<T>& state, flow::FlowModel<T>& model,
               const std::vector<Tensor<T>>& grads) {
  std::vector<Tensor<T>*> params;
  params.reserve(model.n_params());
  for (size_t i = 0; i < model.n_params(); ++i)
    params.push_back(&model.param(static_cast<int>(i)));
  adam_step(state, std::move(params), grads);
}

// ---------------------------------------------------------------------------
// Plateau scheduler

double scheduler_update(PlateauScheduler& state, double val_loss, double lr) {
  if (!std::isfinite(val_loss))
    throw NumericError("scheduler: non-finite validation loss");
  if (val_loss < state.best - state.threshold) {
    state.best = val_loss;
    state.epochs_since_improvement = 0;
    return lr;
  }
  state.epochs_since_improvement += 1;
  if (state.epochs_since_improvement >= state.patience) {
    state.epochs_since_improvement = 0;
    return lr * state.factor;
  }
  return lr;
}

// ---------------------------------------------------------------------------
// Training loop

void TrainConfig::validate() const {
  if (epochs < 1) throw ValueError("train: epochs must be >= 1");
  if (batch_size < 1) throw ValueError("train: batch_size must be >= 1");
  if (chunk_s <= 0.0) throw ValueError("train: chunk_s must be > 0");
  if (sigma_train <= 0.0 || sigma_infer <= 0.0)
    throw ValueError("train: sigmas must be > 0");
  if (sigma_infer > sigma_train)
    throw ValueError("train: sigma_infer must be <= sigma_train");
  model.validate();
}

namespace {

struct LoadedItem {
  audio::Waveform clean;
  audio::Waveform mixture;
};

// Mixes every manifest item up front; files are reused across epochs.
std::vector<LoadedItem> load_items(const std::vector<audio::ManifestItem>& items,
                                   int sample_rate) {
  std::map<std::string, audio::Waveform> cache;
  auto get = [&](const std::filesystem::path& p) -> const audio::Waveform& {
    auto it = cache.find(p.string());
    if (it == cache.end())
      it = cache.emplace(p.string(), audio::read_wav(p)).first;
    return it->second;
  };
  std::vector<LoadedItem> out;
  out.reserve(items.size());
  for (const auto& item : items) {
    LoadedItem li;
    li.clean = get(item.clean_path);
    const audio::Waveform& noise = get(item.noise_path);
    if (li.clean.sample_rate != sample_rate)
      throw ValueError("train: item sample rate does not match the model: " +
                       item.clean_path);
    li.mixture =
        audio::mix_at_snr(li.clean, noise, audio::SnrSpec{item.snr_db}).mixture;
    out.push_back(std::move(li));
  }
  return out;
}

// Fixed center crop trimmed to a multiple of g.
std::pair<audio::Waveform, audio::Waveform> center_crop(const LoadedItem& item,
                                                        double chunk_s, int g) {
  const size_t n = item.clean.samples.size();
  size_t len = std::min<size_t>(
      n, static_cast<size_t>(std::llround(chunk_s * item.clean.sample_rate)));
  len -= len % static_cast<size_t>(g);
  if (len == 0) throw ValueError("train: item shorter than one squeeze group");
  const size_t start = (n - len) / 2;
  auto cut = [&](const audio::Waveform& w) {
    audio::Waveform o;
    o.sample_rate = w.sample_rate;
    o.samples.assign(w.samples.begin() + static_cast<ptrdiff_t>(start),
                     w.samples.begin() + static_cast<ptrdiff_t>(start + len));
    return o;
  };
  return {cut(item.clean), cut(item.mixture)};
}

// Seeded random chunk of the clean/mixture pair at a shared offset.
std::pair<audio::Waveform, audio::Waveform> random_crop(const LoadedItem& item,
                                                        double chunk_s, int g,
                                                        uint64_t seed) {
  audio::Waveform clean = audio::chunk_random(item.clean, chunk_s, seed);
  audio::Waveform mix = audio::chunk_random(item.mixture, chunk_s, seed);
  const size_t len = clean.samples.size() - clean.samples.size() % g;
  if (len == 0) throw ValueError("train: chunk shorter than one squeeze group");
  clean.samples.resize(len);
  mix.samples.resize(len);
  return {std::move(clean), std::move(mix)};
}

// Fixed-order pairwise tree reduction, then mean.
template <typename T>
std::vector<Tensor<T>> mean_grads(std::vector<std::vector<Tensor<T>>> per_item) {
  const size_t n_items = per_item.size();
  while (per_item.size() > 1) {
    std::vector<std::vector<Tensor<T>>> next;
    for (size_t i = 0; i + 1 < per_item.size(); i += 2) {
      for (size_t p = 0; p < per_item[i].size(); ++p) {
        Tensor<T>& a = per_item[i][p];
        const Tensor<T>& b = per_item[i + 1][p];
        for (size_t k = 0; k < a.size(); ++k) a[k] += b[k];
      }
      next.push_back(std::move(per_item[i]));
    }
    if (per_item.size() % 2 == 1) next.push_back(std::move(per_item.back()));
    per_item = std::move(next);
  }
  std::vector<Tensor<T>> out = std::move(per_item.front());
  const T scale = static_cast<T>(1.0 / static_cast<double>(n_items));
  for (auto& t : out)
    for (size_t k = 0; k < t.size(); ++k) t[k] *= scale;
  return out;
}

template <typename T>
double eval_items_nll(const flow::FlowModel<T>& m,
                      const std::vector<LoadedItem>& items, double chunk_s,
                      double sigma) {
  if (items.empty()) throw ValueError("train: empty manifest");
  double acc = 0.0;
  for (const auto& item : items) {
    const auto [clean, mix] = center_crop(item, chunk_s, m.config().g);
    const auto fwd = flow::flow_forward(m, clean, mix);
    acc += flow::nll(fwd.z, fwd.total_logdet, sigma);
  }
  return acc / static_cast<double>(items.size());
}

void append_csv_row(std::ostream& os, const EpochRow& row) {
  os << row.epoch << ',' << std::setprecision(17) << row.train_nll << ','
     << row.val_nll << ',' << row.lr << '\n';
}

}  // namespace

template <typename T>
double evaluate_nll(const flow::FlowModel<T>& m,
                    const std::vector<audio::ManifestItem>& items,
                    double chunk_s, double sigma) {
  return eval_items_nll(m, load_items(items, m.config().sample_rate), chunk_s,
                        sigma);
}

TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out_dir);

  const auto train_items = load_items(
      audio::read_manifest(cfg.train_manifest), cfg.model.sample_rate);
  const auto val_items = load_items(audio::read_manifest(cfg.val_manifest),
                                    cfg.model.sample_rate);
  if (train_items.empty()) throw ValueError("train: empty training manifest");
  if (val_items.empty()) throw ValueError("train: empty validation manifest");

  flow::FlowModel<float> model(cfg.model);
  model.randomize_parameters(Rng::derive(cfg.seed, 1));

  TrainResult res;
  res.csv_path = cfg.out_dir / "loss.csv";
  res.best_checkpoint = cfg.out_dir / "best.fdck";
  res.last_checkpoint = cfg.out_dir / "last.fdck";

  OptimState<float> opt;
  opt.cfg = cfg.adam;
  PlateauScheduler sched;

  std::ofstream csv(res.csv_path);
  if (!csv) throw IoError("cannot open " + res.csv_path.string());
  csv << "epoch,train_nll,val_nll,lr\n";

  // Pre-training snapshot: both figures are center-crop evaluations.
  EpochRow row0;
  row0.epoch = 0;
  row0.train_nll =
      eval_items_nll(model, train_items, cfg.chunk_s, cfg.sigma_train);
  row0.val_nll = eval_items_nll(model, val_items, cfg.chunk_s, 1.0);
  row0.lr = opt.cfg.lr;
  append_csv_row(csv, row0);
  csv.flush();
  res.rows.push_back(row0);

  res.best_val_nll = row0.val_nll;
  res.best_epoch = 0;
  flow::save_checkpoint(res.best_checkpoint, model);
  flow::save_checkpoint(res.last_checkpoint, model);

  std::vector<size_t> order(train_items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng(Rng::derive(cfg.seed, 0x5u + static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order.begin(), order.end());
    const uint64_t chunk_stream =
        Rng::derive(cfg.seed, 0xC0000000u + static_cast<uint64_t>(epoch));

    double epoch_nll = 0.0;
    size_t n_steps = 0;
    for (size_t pos = 0; pos < order.size(); pos += cfg.batch_size) {
      const size_t batch_end =
          std::min(order.size(), pos + static_cast<size_t>(cfg.batch_size));
      std::vector<std::vector<Tensor<float>>> per_item;
      double batch_nll = 0.0;
      for (size_t bi = pos; bi < batch_end; ++bi) {
        const LoadedItem& item = train_items[order[bi]];
        const auto [clean, mix] = random_crop(
            item, cfg.chunk_s, cfg.model.g, Rng::derive(chunk_stream, bi));
        ad::Tape<float> tape;
        const auto fwd =
            flow::flow_forward_tape(model, tape, clean, mix, cfg.sigma_train);
        const double item_nll = static_cast<double>(tape.value(fwd.nll).item());
        if (!std::isfinite(item_nll)) {
          flow::save_checkpoint(cfg.out_dir / "diagnostic.fdck", model);
          throw NumericError(
              "train: non-finite loss at epoch " + std::to_string(epoch) +
              "; diagnostic checkpoint written");
        }
        batch_nll += item_nll;
        tape.backward(fwd.nll);
        std::vector<Tensor<float>> grads;
        grads.reserve(fwd.params.size());
        for (const auto& pv : fwd.params) grads.push_back(tape.grad(pv));
        per_item.push_back(std::move(grads));
      }
      const size_t n_in_batch = batch_end - pos;
      adam_step(opt, model, mean_grads(std::move(per_item)));
      epoch_nll += batch_nll / static_cast<double>(n_in_batch);
      n_steps += 1;
    }

    EpochRow row;
    row.epoch = epoch;
    row.train_nll = epoch_nll / static_cast<double>(n_steps);
    row.val_nll = eval_items_nll(model, val_items, cfg.chunk_s, 1.0);
    row.lr = opt.cfg.lr;
    append_csv_row(csv, row);
    csv.flush();
    res.rows.push_back(row);

    flow::save_checkpoint(res.last_checkpoint, model);
    if (row.val_nll < res.best_val_nll) {
      res.best_val_nll = row.val_nll;
      res.best_epoch = epoch;
      flow::save_checkpoint(res.best_checkpoint, model);
    }
    opt.cfg.lr = scheduler_update(sched, row.val_nll, opt.cfg.lr);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Enhancement and SI-SDR

template <typename T>
audio::Waveform enhance(const flow::FlowModel<T>& m,
                        const audio::Waveform& noisy, double sigma,
                        uint64_t seed) {
  if (sigma <= 0.0) throw ValueError("enhance: sigma must be > 0");
  const int g = m.config().g;
  const auto padded = audio::pad_to_multiple(noisy, g);
  const int frames = static_cast<int>(padded.padded.samples.size()) / g;
  Rng rng(seed);
  Tensor<T> z(g, frames);
  for (size_t i = 0; i < z.size(); ++i)
    z[i] = static_cast<T>(rng.normal() * sigma);
  audio::Waveform out = flow::flow_inverse(m, z, padded.padded);
  out.samples.resize(noisy.samples.size());
  return out;
}

double si_sdr(const audio::Waveform& estimate,
              const audio::Waveform& reference) {
  if (estimate.samples.size() != reference.samples.size())
    throw ShapeError("si_sdr: length mismatch");
  const size_t n = reference.samples.size();
  if (n == 0) throw ValueError("si_sdr: empty signals");
  double dot = 0.0, ref_energy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    dot += estimate.samples[i] * reference.samples[i];
    ref_energy += reference.samples[i] * reference.samples[i];
  }
  if (ref_energy <= 0.0) throw ValueError("si_sdr: zero reference");
  const double alpha = dot / ref_energy;
  double target_energy = 0.0, error_energy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double t = alpha * reference.samples[i];
    const double e = estimate.samples[i] - t;
    target_energy += t * t;
    error_energy += e * e;
  }
  constexpr double kCapDb = 100.0;
  if (error_energy <= 0.0 || target_energy <= 0.0)
    return error_energy <= 0.0 ? kCapDb : -kCapDb;
  return std::min(kCapDb, 10.0 * std::log10(target_energy / error_energy));
}

// ---------------------------------------------------------------------------

#define FDN_INSTANTIATE_TRAIN(T)                                          \
  template void adam_step<T>(OptimState<T>&, std::vector<Tensor<T>*>,     \
                             const std::vector<Tensor<T>>&);              \
  template void adam_step<T>(OptimState<T>&, flow::FlowModel<T>&,         \
                             const std::vector<Tensor<T>>&);              \
  template double evaluate_nll<T>(const flow::FlowModel<T>&,              \
                                  const std::vector<audio::ManifestItem>&, \
                                  double, double);                        \
  template audio::Waveform enhance<T>(const flow::FlowModel<T>&,          \
                                      const audio::Waveform&, double,     \
                                      uint64_t);

FDN_INSTANTIATE_TRAIN(float)
FDN_INSTANTIATE_TRAIN(double)

#undef FDN_INSTANTIATE_TRAIN

}  // namespace fdn::train
