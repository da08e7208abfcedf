#pragma once

// Likelihood training of the flow: Adam with bias correction, plateau LR
// decay, the epoch loop over manifest-described mixtures, enhancement-time
// sampling and a scale-invariant SDR figure for toy experiments.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "flowdenoise/audio.hpp"
#include "flowdenoise/flow.hpp"
#include "flowdenoise/tensor.hpp"

namespace fdn::train {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimState {
  AdamConfig cfg;
  int64_t step = 0;
  std::vector<Tensor<T>> m1;  // sized on first step
  std::vector<Tensor<T>> m2;
};

// Standard Adam update in place; throws NumericError before touching any
// state if a gradient is non-finite.
template <typename T>
void adam_step(OptimState<T>& state, std::vector<Tensor<T>*> params,
               const std::vector<Tensor<T>>& grads);
template <typename T>
void adam_step(OptimState<T>& state, flow::FlowModel<T>& model,
               const std::vector<Tensor<T>>& grads);

struct PlateauScheduler {
  double best = std::numeric_limits<double>::infinity();
  int epochs_since_improvement = 0;
  double factor = 0.5;
  int patience = 10;
  double threshold = 1e-6;
};

// Returns the learning rate for the next epoch; halves it when the counter
// reaches the patience and resets the counter. Never increases lr.
double scheduler_update(PlateauScheduler& state, double val_loss, double lr);

struct TrainConfig {
  int epochs = 200;
  int batch_size = 4;
  double chunk_s = 1.0;
  double sigma_train = 1.0;
  double sigma_infer = 0.9;
  uint64_t seed = 0;
  AdamConfig adam;
  std::filesystem::path train_manifest;
  std::filesystem::path val_manifest;
  std::filesystem::path out_dir;
  flow::FlowConfig model;

  void validate() const;
};

struct EpochRow {
  int epoch = 0;
  double train_nll = 0.0;
  double val_nll = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochRow> rows;  // row 0 is the pre-training evaluation
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::filesystem::path csv_path;
  double best_val_nll = 0.0;
  int best_epoch = 0;
};

// Runs the training protocol: seeded shuffles, 1 s chunks mixed per manifest
// SNR, batches of cfg.batch_size, NLL at sigma_train, Adam steps; per epoch a
// validation NLL at sigma=1 on fixed center crops drives the scheduler and
// best-checkpoint selection. Writes loss.csv, best.fdck and last.fdck under
// cfg.out_dir. Parameters are f32. A non-finite loss halts with a diagnostic
// checkpoint.
TrainResult train(const TrainConfig& cfg);

// Evaluation NLL on fixed center crops of the manifest items (the validation
// policy; also the pre-training row of the loss curve).
template <typename T>
double evaluate_nll(const flow::FlowModel<T>& m,
                    const std::vector<audio::ManifestItem>& items,
                    double chunk_s, double sigma);

// Pads to a multiple of g, draws z ~ N(0, sigma^2 I) from the seed, runs the
// inverse flow conditioned on the noisy input and trims to the input length.
template <typename T>
audio::Waveform enhance(const flow::FlowModel<T>& m,
                        const audio::Waveform& noisy, double sigma,
                        uint64_t seed);

// Scale-invariant SDR with the optimal scaling projection (no mean removal),
// capped at 100 dB.
double si_sdr(const audio::Waveform& estimate, const audio::Waveform& reference);

}  // namespace fdn::train
