#pragma once

// Invertible conditional flow: interleaved squeeze, invertible 1x1
// convolution and affine coupling with WaveNet-style conditional subnets.
// The same parameter set drives three paths: a lean evaluation forward, the
// exact inverse, and a tape-recorded forward for training.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "flowdenoise/audio.hpp"
#include "flowdenoise/autodiff.hpp"
#include "flowdenoise/features.hpp"
#include "flowdenoise/rng.hpp"
#include "flowdenoise/tensor.hpp"

namespace fdn::flow {

enum class CouplingMode : uint8_t { kSingle = 0, kDouble = 1 };

struct FlowConfig {
  int n_blocks = 16;
  int g = 12;  // squeeze factor; must be even
  CouplingMode mode = CouplingMode::kSingle;
  feat::FeatureKind cond_kind = feat::FeatureKind::kTime;
  int hidden_channels = 128;
  int n_layers = 8;
  int kernel_size = 3;
  int cond_channels = 128;  // after the model-level conditional projection
  int sample_rate = 16000;
  feat::MelConfig mel;  // consulted when cond_kind == kMel
  feat::ApgConfig apg;  // consulted when cond_kind == kApg

  void validate() const;
};

// Indices into the parameter registry.
struct SubnetRef {
  int in_w = -1, in_b = -1;
  struct Layer {
    int dw_k = -1, dw_b = -1, pw_w = -1, pw_b = -1;
  };
  std::vector<Layer> layers;
  int cond_dw_k = -1, cond_dw_b = -1, cond_pw_w = -1, cond_pw_b = -1;
  int out_w = -1, out_b = -1;
};

struct BlockRef {
  int inv_w = -1;
  SubnetRef subnet_1;
  std::optional<SubnetRef> subnet_2;
};

struct CondRef {
  int up_k = -1, up_b = -1;  // mel upsampler
  int proj_dw_k = -1, proj_dw_b = -1, proj_pw_w = -1, proj_pw_b = -1;
};

template <typename T>
class FlowModel {
 public:
  explicit FlowModel(const FlowConfig& cfg);

  const FlowConfig& config() const { return cfg_; }
  const std::vector<BlockRef>& blocks() const { return blocks_; }
  const CondRef& cond() const { return cond_; }

  size_t n_params() const { return params_.size(); }
  const std::string& param_name(int idx) const { return names_[idx]; }
  Tensor<T>& param(int idx) { return params_[idx]; }
  const Tensor<T>& param(int idx) const { return params_[idx]; }
  int param_index(const std::string& name) const;

  // Total scalar parameter count.
  size_t count_parameters() const;

  // Orthogonal 1x1 weights, scaled-uniform hidden layers, zero output
  // projections, hold-interpolator upsampler. Identity transform at init.
  void randomize_parameters(uint64_t seed);

  // Filterbank derived from cfg.apg; designed lazily on first use.
  const feat::ApgFilterbank& apg_filterbank() const;

 private:
  int add_param(std::string name, int rows, int cols);
  SubnetRef make_subnet(const std::string& prefix, int squeezed_cond_channels);

  FlowConfig cfg_;
  std::vector<std::string> names_;
  std::vector<Tensor<T>> params_;
  std::unordered_map<std::string, int> index_;
  std::vector<BlockRef> blocks_;
  CondRef cond_;
  mutable std::optional<feat::ApgFilterbank> apg_fb_;
};

// ---------------------------------------------------------------------------
// Stateless ops (test and composition surface)

// Interleaved squeeze: sample (c, t*g + r) -> channel (c*g + r, t).
template <typename T>
Tensor<T> squeeze(const Tensor<T>& x, int g);
template <typename T>
Tensor<T> unsqueeze(const Tensor<T>& x, int g);

template <typename T>
struct Inv1x1Result {
  Tensor<T> y;
  double logdet = 0.0;  // frames * log|det W|
};
template <typename T>
Inv1x1Result<T> inv1x1_forward(const Tensor<T>& w, const Tensor<T>& x);
template <typename T>
Tensor<T> inv1x1_inverse(const Tensor<T>& w, const Tensor<T>& y);

// Subnet evaluation: x_half is G/2 x T, cond is cond_channels x T; returns
// (log_s, t), each G/2 x T. which selects subnet_1 (1) or subnet_2 (2).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> subnet_apply(const FlowModel<T>& m, int block,
                                             int which, const Tensor<T>& x_half,
                                             const Tensor<T>& cond);

template <typename T>
struct CouplingResult {
  Tensor<T> y;
  double logdet = 0.0;
};
template <typename T>
CouplingResult<T> coupling_forward(const FlowModel<T>& m, int block,
                                   const Tensor<T>& x, const Tensor<T>& cond);
template <typename T>
Tensor<T> coupling_inverse(const FlowModel<T>& m, int block,
                           const Tensor<T>& y, const Tensor<T>& cond);

// ---------------------------------------------------------------------------
// Whole-flow evaluation

// Featurizes the conditional waveform per cfg.cond_kind and runs the
// subsample-and-project pipeline; result is cond_channels x (N/g).
template <typename T>
Tensor<T> condition_pipeline(const FlowModel<T>& m, const audio::Waveform& cond_raw,
                             size_t n_samples);

template <typename T>
struct ForwardResult {
  Tensor<T> z;           // g x (N/g)
  double total_logdet = 0.0;
};

// x and cond_raw must have equal length divisible by g.
template <typename T>
ForwardResult<T> flow_forward(const FlowModel<T>& m, const audio::Waveform& x,
                              const audio::Waveform& cond_raw);

template <typename T>
audio::Waveform flow_inverse(const FlowModel<T>& m, const Tensor<T>& z,
                             const audio::Waveform& cond_raw);

// Mean-per-dimension negative log-likelihood:
// [sum(z^2)/(2*sigma^2) + D*log(sigma*sqrt(2*pi)) - total_logdet] / D.
template <typename T>
double nll(const Tensor<T>& z, double total_logdet, double sigma);

// ---------------------------------------------------------------------------
// Tape-recorded forward for training

template <typename T>
struct TapeForward {
  ad::Var nll;                  // scalar node
  std::vector<ad::Var> params;  // leaf per model parameter, registry order
};

// Builds the full forward pass on the given tape and returns the NLL node;
// after tape.backward(res.nll), grads are read per parameter leaf.
template <typename T>
TapeForward<T> flow_forward_tape(const FlowModel<T>& m, ad::Tape<T>& tape,
                                 const audio::Waveform& x,
                                 const audio::Waveform& cond_raw, double sigma);

// ---------------------------------------------------------------------------
// Checkpoint container ("FDCK"): magic, u32 version, JSON config header,
// then named parameter records (name, u64 element count, f32 data).

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const FlowModel<T>& m);
template <typename T>
FlowModel<T> load_checkpoint(const std::filesystem::path& path);

std::string mode_name(CouplingMode mode);
CouplingMode mode_from_name(const std::string& name);
std::string cond_kind_name(feat::FeatureKind kind);
feat::FeatureKind cond_kind_from_name(const std::string& name);

extern template class FlowModel<float>;
extern template class FlowModel<double>;

}  // namespace fdn::flow
