#include "flowdenoise/flow.hpp"

#include <json.hpp>

#include <Eigen/LU>
#include <Eigen/QR>

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "binio.hpp"
#include "flowdenoise/errors.hpp"
#include "kernels.hpp"

namespace fdn::flow {

namespace {
// log(sqrt(2*pi))
constexpr double kLogSqrt2Pi = 0.91893853320467274178;
}

void FlowConfig::validate() const {
  if (n_blocks < 1) throw ValueError("flow: n_blocks must be >= 1");
  if (g < 2 || g % 2 != 0) throw ValueError("flow: g must be even and >= 2");
  if (hidden_channels < 1) throw ValueError("flow: hidden_channels");
  if (n_layers < 1) throw ValueError("flow: n_layers");
  if (kernel_size < 1 || kernel_size % 2 == 0)
    throw ValueError("flow: kernel_size must be odd");
  if (cond_channels < 1) throw ValueError("flow: cond_channels");
  if (sample_rate < 1) throw ValueError("flow: sample_rate");
}

// ---------------------------------------------------------------------------
// Model construction

template <typename T>
int FlowModel<T>::add_param(std::string name, int rows, int cols) {
  const int idx = static_cast<int>(params_.size());
  index_.emplace(name, idx);
  names_.push_back(std::move(name));
  params_.emplace_back(rows, cols);
  return idx;
}

template <typename T>
SubnetRef FlowModel<T>::make_subnet(const std::string& prefix,
                                    int /*squeezed_cond_channels*/) {
  const int h = cfg_.hidden_channels;
  const int half = cfg_.g / 2;
  SubnetRef net;
  net.in_w = add_param(prefix + ".in.weight", h, half);
  net.in_b = add_param(prefix + ".in.bias", 1, h);
  net.layers.resize(cfg_.n_layers);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string lp = prefix + ".layer" + std::to_string(l);
    net.layers[l].dw_k = add_param(lp + ".dw.kernel", h, cfg_.kernel_size);
    net.layers[l].dw_b = add_param(lp + ".dw.bias", 1, h);
    net.layers[l].pw_w = add_param(lp + ".pw.weight", 2 * h, h);
    net.layers[l].pw_b = add_param(lp + ".pw.bias", 1, 2 * h);
  }
  net.cond_dw_k =
      add_param(prefix + ".cond.dw.kernel", cfg_.cond_channels, cfg_.kernel_size);
  net.cond_dw_b = add_param(prefix + ".cond.dw.bias", 1, cfg_.cond_channels);
  net.cond_pw_w = add_param(prefix + ".cond.pw.weight", 2 * h * cfg_.n_layers,
                            cfg_.cond_channels);
  net.cond_pw_b = add_param(prefix + ".cond.pw.bias", 1, 2 * h * cfg_.n_layers);
  net.out_w = add_param(prefix + ".out.weight", cfg_.g, h);
  net.out_b = add_param(prefix + ".out.bias", 1, cfg_.g);
  return net;
}

namespace {

int feature_channels(const FlowConfig& cfg) {
  switch (cfg.cond_kind) {
    case feat::FeatureKind::kTime: return 1;
    case feat::FeatureKind::kMel: return cfg.mel.n_bands;
    case feat::FeatureKind::kApg: return cfg.apg.n_bands;
  }
  throw ValueError("flow: unknown cond kind");
}

}  // namespace

template <typename T>
FlowModel<T>::FlowModel(const FlowConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int squeezed_cond = feature_channels(cfg_) * cfg_.g;
  if (cfg_.cond_kind == feat::FeatureKind::kMel) {
    const int hop = feat::mel_hop(cfg_.mel);
    cond_.up_k = add_param("cond.upsample.kernel", cfg_.mel.n_bands, 2 * hop);
    cond_.up_b = add_param("cond.upsample.bias", 1, cfg_.mel.n_bands);
  }
  cond_.proj_dw_k =
      add_param("cond.proj.dw.kernel", squeezed_cond, cfg_.kernel_size);
  cond_.proj_dw_b = add_param("cond.proj.dw.bias", 1, squeezed_cond);
  cond_.proj_pw_w =
      add_param("cond.proj.pw.weight", cfg_.cond_channels, squeezed_cond);
  cond_.proj_pw_b = add_param("cond.proj.pw.bias", 1, cfg_.cond_channels);

  blocks_.resize(cfg_.n_blocks);
  for (int b = 0; b < cfg_.n_blocks; ++b) {
    const std::string bp = "block" + std::to_string(b);
    blocks_[b].inv_w = add_param(bp + ".inv1x1.weight", cfg_.g, cfg_.g);
    blocks_[b].subnet_1 = make_subnet(bp + ".sub1", squeezed_cond);
    if (cfg_.mode == CouplingMode::kDouble)
      blocks_[b].subnet_2 = make_subnet(bp + ".sub2", squeezed_cond);
  }
}

template <typename T>
int FlowModel<T>::param_index(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("flow: unknown parameter " + name);
  return it->second;
}

template <typename T>
size_t FlowModel<T>::count_parameters() const {
  size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

namespace {

// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the sign
// of diag(R) folded into Q's columns.
Eigen::MatrixXd random_orthogonal(int n, Rng& rng) {
  Eigen::MatrixXd a(n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) a(r, c) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r_mat = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int c = 0; c < n; ++c)
    if (r_mat(c, c) < 0) q.col(c) = -q.col(c);
  return q;
}

template <typename T>
void fill_uniform(Tensor<T>& t, double limit, Rng& rng) {
  for (size_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<T>((2.0 * rng.uniform() - 1.0) * limit);
}

}  // namespace

template <typename T>
void FlowModel<T>::randomize_parameters(uint64_t seed) {
  Rng rng(seed);
  const double lim_half = std::sqrt(1.0 / (cfg_.g / 2));
  const double lim_kernel = std::sqrt(1.0 / cfg_.kernel_size);
  const double lim_hidden = std::sqrt(1.0 / cfg_.hidden_channels);
  const double lim_cond = std::sqrt(1.0 / cfg_.cond_channels);
  const int squeezed_cond = feature_channels(cfg_) * cfg_.g;
  const double lim_proj = std::sqrt(1.0 / squeezed_cond);

  if (cfg_.cond_kind == feat::FeatureKind::kMel) {
    // Hold interpolator: repeats each frame hop times; bias zero.
    const int hop = feat::mel_hop(cfg_.mel);
    const auto up = feat::nearest_neighbor_upsampler(cfg_.mel.n_bands, hop);
    params_[cond_.up_k] = up.kernel.template cast<T>();
    params_[cond_.up_b].fill(T(0));
  }
  fill_uniform(params_[cond_.proj_dw_k], lim_kernel, rng);
  params_[cond_.proj_dw_b].fill(T(0));
  fill_uniform(params_[cond_.proj_pw_w], lim_proj, rng);
  params_[cond_.proj_pw_b].fill(T(0));

  auto init_subnet = [&](const SubnetRef& net) {
    fill_uniform(params_[net.in_w], lim_half, rng);
    params_[net.in_b].fill(T(0));
    for (const auto& ly : net.layers) {
      fill_uniform(params_[ly.dw_k], lim_kernel, rng);
      params_[ly.dw_b].fill(T(0));
      fill_uniform(params_[ly.pw_w], lim_hidden, rng);
      params_[ly.pw_b].fill(T(0));
    }
    fill_uniform(params_[net.cond_dw_k], lim_kernel, rng);
    params_[net.cond_dw_b].fill(T(0));
    fill_uniform(params_[net.cond_pw_w], lim_cond, rng);
    params_[net.cond_pw_b].fill(T(0));
    params_[net.out_w].fill(T(0));
    params_[net.out_b].fill(T(0));
  };

  for (auto& block : blocks_) {
    const Eigen::MatrixXd q = random_orthogonal(cfg_.g, rng);
    Tensor<T>& w = params_[block.inv_w];
    for (int r = 0; r < cfg_.g; ++r)
      for (int c = 0; c < cfg_.g; ++c) w(r, c) = static_cast<T>(q(r, c));
    init_subnet(block.subnet_1);
    if (block.subnet_2) init_subnet(*block.subnet_2);
  }
}

template <typename T>
const feat::ApgFilterbank& FlowModel<T>::apg_filterbank() const {
  if (!apg_fb_) apg_fb_ = feat::design_apg(cfg_.apg, cfg_.sample_rate);
  return *apg_fb_;
}

// ---------------------------------------------------------------------------
// Stateless ops

template <typename T>
Tensor<T> squeeze(const Tensor<T>& x, int g) {
  Tensor<T> out;
  kern::squeeze_forward(x, g, out);
  return out;
}

template <typename T>
Tensor<T> unsqueeze(const Tensor<T>& x, int g) {
  Tensor<T> out;
  kern::unsqueeze_forward(x, g, out);
  return out;
}

template <typename T>
Inv1x1Result<T> inv1x1_forward(const Tensor<T>& w, const Tensor<T>& x) {
  if (w.rows() != w.cols() || w.rows() != x.rows())
    throw ShapeError("inv1x1: weight/input mismatch");
  Inv1x1Result<T> res;
  kern::pointwise_forward(w, static_cast<const Tensor<T>*>(nullptr), x, res.y);
  Eigen::PartialPivLU<kern::EMat<T>> lu(kern::cmap(w));
  double log_abs_det = 0.0;
  for (int i = 0; i < w.rows(); ++i) {
    const double d = std::abs(static_cast<double>(lu.matrixLU()(i, i)));
    if (d < 1e-12) throw NumericError("inv1x1: weight is singular");
    log_abs_det += std::log(d);
  }
  res.logdet = static_cast<double>(x.cols()) * log_abs_det;
  return res;
}

template <typename T>
Tensor<T> inv1x1_inverse(const Tensor<T>& w, const Tensor<T>& y) {
  if (w.rows() != w.cols() || w.rows() != y.rows())
    throw ShapeError("inv1x1: weight/input mismatch");
  Eigen::PartialPivLU<kern::EMat<T>> lu(kern::cmap(w));
  for (int i = 0; i < w.rows(); ++i)
    if (std::abs(static_cast<double>(lu.matrixLU()(i, i))) < 1e-12)
      throw NumericError("inv1x1: weight is singular");
  Tensor<T> x(y.rows(), y.cols());
  kern::map(x).noalias() = lu.solve(kern::cmap(y));
  return x;
}

// ---------------------------------------------------------------------------
// Shared subnet / conditional-path orchestration

namespace {

template <typename T>
struct EvalCtx {
  using V = Tensor<T>;
  const FlowModel<T>& model;
  V param(int idx) const { return model.param(idx); }
  V pointwise(const V& w, const V& b, const V& x) const {
    V o;
    kern::pointwise_forward(w, &b, x, o);
    return o;
  }
  V depthwise(const V& k, const V& b, int dil, const V& x) const {
    V o;
    kern::depthwise_forward(k, &b, dil, x, o);
    return o;
  }
  V tconv(const V& k, const V& b, int stride, int out_len, const V& x) const {
    V o;
    kern::tconv_depthwise_forward(k, &b, stride, out_len, x, o);
    return o;
  }
  V gated(const V& x) const {
    V o;
    kern::gated_forward(x, o);
    return o;
  }
  V add(const V& a, const V& b) const {
    if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
    V o(a.rows(), a.cols());
    for (size_t i = 0; i < a.size(); ++i) o[i] = a[i] + b[i];
    return o;
  }
  V slice_rows(const V& x, int r0, int r1) const {
    if (r0 < 0 || r1 > x.rows() || r0 >= r1)
      throw ShapeError("slice_rows: bad range");
    V o(r1 - r0, x.cols());
    std::copy(x.data() + static_cast<size_t>(r0) * x.cols(),
              x.data() + static_cast<size_t>(r1) * x.cols(), o.data());
    return o;
  }
  V squeeze(const V& x, int g) const {
    V o;
    kern::squeeze_forward(x, g, o);
    return o;
  }
};

template <typename T>
struct TapeCtx {
  using V = ad::Var;
  ad::Tape<T>& tape;
  const std::vector<ad::Var>& pvars;
  V param(int idx) const { return pvars[idx]; }
  V pointwise(const V& w, const V& b, const V& x) const {
    return tape.pointwise(w, b, x);
  }
  V depthwise(const V& k, const V& b, int dil, const V& x) const {
    return tape.depthwise(k, b, dil, x);
  }
  V tconv(const V& k, const V& b, int stride, int out_len, const V& x) const {
    return tape.tconv_depthwise(k, b, stride, out_len, x);
  }
  V gated(const V& x) const { return tape.gated(x); }
  V add(const V& a, const V& b) const { return tape.add(a, b); }
  V slice_rows(const V& x, int r0, int r1) const {
    return tape.slice_rows(x, r0, r1);
  }
  V squeeze(const V& x, int g) const { return tape.squeeze(x, g); }
};

// Dilated depthwise-separable stack with gated activations, a direct
// residual path and a skip sum; conditioning is projected once and split
// into a per-layer additive pre-activation term.
template <typename T, class Ctx>
std::pair<typename Ctx::V, typename Ctx::V> subnet_apply_ctx(
    Ctx& cx, const FlowConfig& cfg, const SubnetRef& net,
    const typename Ctx::V& x_half, const typename Ctx::V& cond) {
  using V = typename Ctx::V;
  V h = cx.pointwise(cx.param(net.in_w), cx.param(net.in_b), x_half);
  V cond_dw =
      cx.depthwise(cx.param(net.cond_dw_k), cx.param(net.cond_dw_b), 1, cond);
  V cond_all =
      cx.pointwise(cx.param(net.cond_pw_w), cx.param(net.cond_pw_b), cond_dw);
  const int two_h = 2 * cfg.hidden_channels;
  V skip;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& ly = net.layers[l];
    V d = cx.depthwise(cx.param(ly.dw_k), cx.param(ly.dw_b), 1 << l, h);
    V p = cx.pointwise(cx.param(ly.pw_w), cx.param(ly.pw_b), d);
    V pre = cx.add(p, cx.slice_rows(cond_all, l * two_h, (l + 1) * two_h));
    V gt = cx.gated(pre);
    h = cx.add(h, gt);
    skip = (l == 0) ? gt : cx.add(skip, gt);
  }
  V out = cx.pointwise(cx.param(net.out_w), cx.param(net.out_b), skip);
  const int half = cfg.g / 2;
  return {cx.slice_rows(out, 0, half), cx.slice_rows(out, half, cfg.g)};
}

template <typename T, class Ctx>
typename Ctx::V cond_pipeline_ctx(Ctx& cx, const FlowModel<T>& m,
                                  const typename Ctx::V& cond_feat,
                                  int n_samples) {
  using V = typename Ctx::V;
  const FlowConfig& cfg = m.config();
  const CondRef& cr = m.cond();
  V at_rate = cond_feat;
  if (cfg.cond_kind == feat::FeatureKind::kMel)
    at_rate = cx.tconv(cx.param(cr.up_k), cx.param(cr.up_b),
                       feat::mel_hop(cfg.mel), n_samples, cond_feat);
  V sq = cx.squeeze(at_rate, cfg.g);
  V dw =
      cx.depthwise(cx.param(cr.proj_dw_k), cx.param(cr.proj_dw_b), 1, sq);
  return cx.pointwise(cx.param(cr.proj_pw_w), cx.param(cr.proj_pw_b), dw);
}

// Conditional front end (features module), cast to the model precision.
template <typename T>
Tensor<T> featurize_cond(const FlowModel<T>& m, const audio::Waveform& w) {
  const FlowConfig& cfg = m.config();
  if (w.sample_rate != cfg.sample_rate)
    throw ValueError("flow: conditional sample rate mismatch");
  feat::FeatureMap fm;
  switch (cfg.cond_kind) {
    case feat::FeatureKind::kTime: fm = feat::time_features(w); break;
    case feat::FeatureKind::kMel: fm = feat::mel_spectrogram(cfg.mel, w); break;
    case feat::FeatureKind::kApg:
      fm = feat::apg_analyze(m.apg_filterbank(), w);
      break;
  }
  return fm.data.template cast<T>();
}

template <typename T>
double sum_f64(const Tensor<T>& t) {
  double acc = 0.0;
  for (size_t i = 0; i < t.size(); ++i) acc += static_cast<double>(t[i]);
  return acc;
}

}  // namespace

template <typename T>
std::pair<Tensor<T>, Tensor<T>> subnet_apply(const FlowModel<T>& m, int block,
                                             int which,
                                             const Tensor<T>& x_half,
                                             const Tensor<T>& cond) {
  if (block < 0 || block >= static_cast<int>(m.blocks().size()))
    throw ValueError("flow: block index");
  const BlockRef& br = m.blocks()[block];
  const SubnetRef* net = nullptr;
  if (which == 1)
    net = &br.subnet_1;
  else if (which == 2 && br.subnet_2)
    net = &*br.subnet_2;
  else
    throw ValueError("flow: no such subnet");
  EvalCtx<T> cx{m};
  return subnet_apply_ctx<T>(cx, m.config(), *net, x_half, cond);
}

template <typename T>
CouplingResult<T> coupling_forward(const FlowModel<T>& m, int block,
                                   const Tensor<T>& x, const Tensor<T>& cond) {
  const FlowConfig& cfg = m.config();
  if (x.rows() != cfg.g) throw ShapeError("coupling: channel count");
  if (block < 0 || block >= cfg.n_blocks) throw ValueError("flow: block index");
  const BlockRef& br = m.blocks()[block];
  const int half = cfg.g / 2;
  EvalCtx<T> cx{m};
  Tensor<T> x1 = cx.slice_rows(x, 0, half);
  Tensor<T> x2 = cx.slice_rows(x, half, cfg.g);

  CouplingResult<T> res;
  auto [ls1, t1] = subnet_apply_ctx<T>(cx, cfg, br.subnet_1, x2, cond);
  Tensor<T> y1(half, x.cols());
  for (size_t i = 0; i < y1.size(); ++i)
    y1[i] = std::exp(ls1[i]) * x1[i] + t1[i];
  res.logdet = sum_f64(ls1);

  Tensor<T> y2 = x2;
  if (br.subnet_2) {
    auto [ls2, t2] = subnet_apply_ctx<T>(cx, cfg, *br.subnet_2, y1, cond);
    for (size_t i = 0; i < y2.size(); ++i)
      y2[i] = std::exp(ls2[i]) * x2[i] + t2[i];
    res.logdet += sum_f64(ls2);
  }
  res.y = Tensor<T>(cfg.g, x.cols());
  std::copy(y1.data(), y1.data() + y1.size(), res.y.data());
  std::copy(y2.data(), y2.data() + y2.size(), res.y.data() + y1.size());
  return res;
}

template <typename T>
Tensor<T> coupling_inverse(const FlowModel<T>& m, int block,
                           const Tensor<T>& y, const Tensor<T>& cond) {
  const FlowConfig& cfg = m.config();
  if (y.rows() != cfg.g) throw ShapeError("coupling: channel count");
  if (block < 0 || block >= cfg.n_blocks) throw ValueError("flow: block index");
  const BlockRef& br = m.blocks()[block];
  const int half = cfg.g / 2;
  EvalCtx<T> cx{m};
  Tensor<T> y1 = cx.slice_rows(y, 0, half);
  Tensor<T> y2 = cx.slice_rows(y, half, cfg.g);

  Tensor<T> x2 = y2;
  if (br.subnet_2) {
    auto [ls2, t2] = subnet_apply_ctx<T>(cx, cfg, *br.subnet_2, y1, cond);
    for (size_t i = 0; i < x2.size(); ++i)
      x2[i] = (y2[i] - t2[i]) * std::exp(-ls2[i]);
  }
  auto [ls1, t1] = subnet_apply_ctx<T>(cx, cfg, br.subnet_1, x2, cond);
  Tensor<T> x1(half, y.cols());
  for (size_t i = 0; i < x1.size(); ++i)
    x1[i] = (y1[i] - t1[i]) * std::exp(-ls1[i]);

  Tensor<T> x(cfg.g, y.cols());
  std::copy(x1.data(), x1.data() + x1.size(), x.data());
  std::copy(x2.data(), x2.data() + x2.size(), x.data() + x1.size());
  return x;
}

// ---------------------------------------------------------------------------
// Whole-flow evaluation

template <typename T>
Tensor<T> condition_pipeline(const FlowModel<T>& m,
                             const audio::Waveform& cond_raw,
                             size_t n_samples) {
  const FlowConfig& cfg = m.config();
  if (cond_raw.samples.size() != n_samples)
    throw ShapeError("flow: conditional length mismatch");
  if (n_samples % cfg.g != 0)
    throw ShapeError("flow: length not divisible by g");
  EvalCtx<T> cx{m};
  const Tensor<T> feat_t = featurize_cond(m, cond_raw);
  return cond_pipeline_ctx<T>(cx, m, feat_t, static_cast<int>(n_samples));
}

namespace {

template <typename T>
Tensor<T> signal_tensor(const audio::Waveform& w) {
  Tensor<T> t(1, static_cast<int>(w.samples.size()));
  for (size_t i = 0; i < w.samples.size(); ++i)
    t[i] = static_cast<T>(w.samples[i]);
  return t;
}

}  // namespace

template <typename T>
ForwardResult<T> flow_forward(const FlowModel<T>& m, const audio::Waveform& x,
                              const audio::Waveform& cond_raw) {
  const FlowConfig& cfg = m.config();
  if (x.samples.size() != cond_raw.samples.size())
    throw ShapeError("flow: input/conditional length mismatch");
  if (x.samples.size() % cfg.g != 0)
    throw ShapeError("flow: length not divisible by g");
  if (x.sample_rate != cfg.sample_rate)
    throw ValueError("flow: input sample rate mismatch");

  const Tensor<T> cond = condition_pipeline(m, cond_raw, x.samples.size());
  ForwardResult<T> res;
  res.z = squeeze(signal_tensor<T>(x), cfg.g);
  for (int b = 0; b < cfg.n_blocks; ++b) {
    auto r1 = inv1x1_forward(m.param(m.blocks()[b].inv_w), res.z);
    res.total_logdet += r1.logdet;
    auto rc = coupling_forward(m, b, r1.y, cond);
    res.total_logdet += rc.logdet;
    res.z = std::move(rc.y);
  }
  return res;
}

template <typename T>
audio::Waveform flow_inverse(const FlowModel<T>& m, const Tensor<T>& z,
                             const audio::Waveform& cond_raw) {
  const FlowConfig& cfg = m.config();
  if (z.rows() != cfg.g) throw ShapeError("flow: z channel count");
  const size_t n = static_cast<size_t>(z.rows()) * z.cols();
  if (cond_raw.samples.size() != n)
    throw ShapeError("flow: conditional length mismatch");

  const Tensor<T> cond = condition_pipeline(m, cond_raw, n);
  Tensor<T> cur = z;
  for (int b = cfg.n_blocks - 1; b >= 0; --b) {
    cur = coupling_inverse(m, b, cur, cond);
    cur = inv1x1_inverse(m.param(m.blocks()[b].inv_w), cur);
  }
  const Tensor<T> flat = unsqueeze(cur, cfg.g);
  audio::Waveform out;
  out.sample_rate = cfg.sample_rate;
  out.samples.resize(flat.size());
  for (size_t i = 0; i < flat.size(); ++i)
    out.samples[i] = static_cast<double>(flat[i]);
  return out;
}

template <typename T>
double nll(const Tensor<T>& z, double total_logdet, double sigma) {
  if (sigma <= 0.0) throw ValueError("nll: sigma must be > 0");
  if (z.size() == 0) throw ValueError("nll: empty z");
  double ss = 0.0;
  for (size_t i = 0; i < z.size(); ++i) {
    const double v = static_cast<double>(z[i]);
    ss += v * v;
  }
  const double d = static_cast<double>(z.size());
  return ss / (2.0 * sigma * sigma * d) + std::log(sigma) + kLogSqrt2Pi -
         total_logdet / d;
}

// ---------------------------------------------------------------------------
// Tape-recorded forward

template <typename T>
TapeForward<T> flow_forward_tape(const FlowModel<T>& m, ad::Tape<T>& tape,
                                 const audio::Waveform& x,
                                 const audio::Waveform& cond_raw,
                                 double sigma) {
  const FlowConfig& cfg = m.config();
  if (sigma <= 0.0) throw ValueError("nll: sigma must be > 0");
  if (x.samples.size() != cond_raw.samples.size())
    throw ShapeError("flow: input/conditional length mismatch");
  if (x.samples.size() % cfg.g != 0)
    throw ShapeError("flow: length not divisible by g");
  if (x.sample_rate != cfg.sample_rate)
    throw ValueError("flow: input sample rate mismatch");

  TapeForward<T> res;
  res.params.reserve(m.n_params());
  for (size_t i = 0; i < m.n_params(); ++i)
    res.params.push_back(tape.input(m.param(static_cast<int>(i)), true));
  TapeCtx<T> cx{tape, res.params};

  const int frames = static_cast<int>(x.samples.size()) / cfg.g;
  const ad::Var cond_feat = tape.input(featurize_cond(m, cond_raw), false);
  const ad::Var cond = cond_pipeline_ctx<T>(
      cx, m, cond_feat, static_cast<int>(x.samples.size()));

  ad::Var cur = tape.input(squeeze(signal_tensor<T>(x), cfg.g), false);
  const int half = cfg.g / 2;
  std::vector<std::pair<double, ad::Var>> terms;
  for (const BlockRef& br : m.blocks()) {
    const ad::Var w = res.params[br.inv_w];
    cur = tape.pointwise(w, ad::Var{}, cur);
    terms.emplace_back(1.0, tape.logdet_frames(w, frames));

    ad::Var x1 = tape.slice_rows(cur, 0, half);
    ad::Var x2 = tape.slice_rows(cur, half, cfg.g);
    auto [ls1, t1] = subnet_apply_ctx<T>(cx, cfg, br.subnet_1, x2, cond);
    ad::Var y1 = tape.add(tape.mul(tape.vexp(ls1), x1), t1);
    terms.emplace_back(1.0, tape.sum_all(ls1));
    if (br.subnet_2) {
      auto [ls2, t2] = subnet_apply_ctx<T>(cx, cfg, *br.subnet_2, y1, cond);
      ad::Var y2 = tape.add(tape.mul(tape.vexp(ls2), x2), t2);
      terms.emplace_back(1.0, tape.sum_all(ls2));
      cur = tape.concat_rows(y1, y2);
    } else {
      cur = tape.concat_rows(y1, x2);
    }
  }
  const double d = static_cast<double>(cfg.g) * frames;
  std::vector<std::pair<double, ad::Var>> nll_terms;
  nll_terms.emplace_back(1.0 / (2.0 * sigma * sigma * d),
                         tape.sum_squares(cur));
  for (const auto& [coeff, v] : terms) nll_terms.emplace_back(-coeff / d, v);
  res.nll =
      tape.combine_scalars(nll_terms, std::log(sigma) + kLogSqrt2Pi);
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

std::string mode_name(CouplingMode mode) {
  return mode == CouplingMode::kSingle ? "single" : "double";
}

CouplingMode mode_from_name(const std::string& name) {
  if (name == "single") return CouplingMode::kSingle;
  if (name == "double") return CouplingMode::kDouble;
  throw ValueError("flow: unknown coupling mode '" + name + "'");
}

std::string cond_kind_name(feat::FeatureKind kind) {
  switch (kind) {
    case feat::FeatureKind::kTime: return "time";
    case feat::FeatureKind::kMel: return "mel";
    case feat::FeatureKind::kApg: return "apg";
  }
  throw ValueError("flow: unknown cond kind");
}

feat::FeatureKind cond_kind_from_name(const std::string& name) {
  if (name == "time") return feat::FeatureKind::kTime;
  if (name == "mel") return feat::FeatureKind::kMel;
  if (name == "apg") return feat::FeatureKind::kApg;
  throw ValueError("flow: unknown cond kind '" + name + "'");
}

namespace {

constexpr char kFdckMagic[4] = {'F', 'D', 'C', 'K'};
constexpr uint32_t kFdckVersion = 1;

nlohmann::json config_to_json(const FlowConfig& cfg) {
  return nlohmann::json{
      {"n_blocks", cfg.n_blocks},
      {"g", cfg.g},
      {"mode", mode_name(cfg.mode)},
      {"cond_kind", cond_kind_name(cfg.cond_kind)},
      {"hidden_channels", cfg.hidden_channels},
      {"n_layers", cfg.n_layers},
      {"kernel_size", cfg.kernel_size},
      {"cond_channels", cfg.cond_channels},
      {"sample_rate", cfg.sample_rate},
      {"mel",
       {{"fft_size", cfg.mel.fft_size},
        {"overlap", cfg.mel.overlap},
        {"n_bands", cfg.mel.n_bands},
        {"fmin_hz", cfg.mel.fmin_hz},
        {"fmax_hz", cfg.mel.fmax_hz}}},
      {"apg",
       {{"n_bands", cfg.apg.n_bands},
        {"fmin_hz", cfg.apg.fmin_hz},
        {"order", cfg.apg.order},
        {"lookahead", cfg.apg.lookahead},
        {"bandwidth_scale", cfg.apg.bandwidth_scale}}}};
}

FlowConfig config_from_json(const nlohmann::json& j) {
  FlowConfig cfg;
  cfg.n_blocks = j.at("n_blocks").get<int>();
  cfg.g = j.at("g").get<int>();
  cfg.mode = mode_from_name(j.at("mode").get<std::string>());
  cfg.cond_kind = cond_kind_from_name(j.at("cond_kind").get<std::string>());
  cfg.hidden_channels = j.at("hidden_channels").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.kernel_size = j.at("kernel_size").get<int>();
  cfg.cond_channels = j.at("cond_channels").get<int>();
  cfg.sample_rate = j.at("sample_rate").get<int>();
  const auto& mel = j.at("mel");
  cfg.mel.fft_size = mel.at("fft_size").get<int>();
  cfg.mel.overlap = mel.at("overlap").get<double>();
  cfg.mel.n_bands = mel.at("n_bands").get<int>();
  cfg.mel.fmin_hz = mel.at("fmin_hz").get<double>();
  cfg.mel.fmax_hz = mel.at("fmax_hz").get<double>();
  const auto& apg = j.at("apg");
  cfg.apg.n_bands = apg.at("n_bands").get<int>();
  cfg.apg.fmin_hz = apg.at("fmin_hz").get<double>();
  cfg.apg.order = apg.at("order").get<int>();
  cfg.apg.lookahead = apg.at("lookahead").get<double>();
  cfg.apg.bandwidth_scale = apg.at("bandwidth_scale").get<double>();
  return cfg;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path,
                     const FlowModel<T>& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  binio::write_magic(os, kFdckMagic);
  binio::write_pod<uint32_t>(os, kFdckVersion);
  binio::write_string(os, config_to_json(m.config()).dump());
  for (size_t i = 0; i < m.n_params(); ++i) {
    const Tensor<T>& p = m.param(static_cast<int>(i));
    binio::write_string(os, m.param_name(static_cast<int>(i)));
    binio::write_pod<uint64_t>(os, static_cast<uint64_t>(p.size()));
    if constexpr (std::is_same_v<T, float>) {
      os.write(reinterpret_cast<const char*>(p.data()),
               static_cast<std::streamsize>(p.size() * sizeof(float)));
    } else {
      std::vector<float> buf(p.size());
      for (size_t k = 0; k < p.size(); ++k) buf[k] = static_cast<float>(p[k]);
      os.write(reinterpret_cast<const char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
  }
  if (!os) throw IoError("short write: " + path.string());
}

template <typename T>
FlowModel<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  binio::expect_magic(is, kFdckMagic, "FDCK");
  const auto version = binio::read_pod<uint32_t>(is, "version");
  if (version != kFdckVersion) throw FormatError("unsupported FDCK version");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(binio::read_string(is, "config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint config: ") + e.what());
  }
  FlowConfig cfg;
  try {
    cfg = config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint config: ") + e.what());
  }
  FlowModel<T> m(cfg);

  std::set<std::string> seen;
  while (true) {
    is.peek();
    if (is.eof()) break;
    const std::string name = binio::read_string(is, "parameter name");
    const auto count = binio::read_pod<uint64_t>(is, "element count");
    const int idx = m.param_index(name);
    Tensor<T>& p = m.param(idx);
    if (count != p.size())
      throw FormatError("checkpoint: size mismatch for " + name);
    if (!seen.insert(name).second)
      throw FormatError("checkpoint: duplicate parameter " + name);
    std::vector<float> buf(count);
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    if (!is) throw FormatError("checkpoint: truncated data for " + name);
    for (size_t k = 0; k < count; ++k) p[k] = static_cast<T>(buf[k]);
  }
  if (seen.size() != m.n_params())
    throw FormatError("checkpoint: missing parameters");
  return m;
}

// ---------------------------------------------------------------------------

template class FlowModel<float>;
template class FlowModel<double>;

#define FDN_INSTANTIATE_FLOW(T)                                               \
  template Tensor<T> squeeze<T>(const Tensor<T>&, int);                       \
  template Tensor<T> unsqueeze<T>(const Tensor<T>&, int);                     \
  template Inv1x1Result<T> inv1x1_forward<T>(const Tensor<T>&,                \
                                             const Tensor<T>&);               \
  template Tensor<T> inv1x1_inverse<T>(const Tensor<T>&, const Tensor<T>&);   \
  template std::pair<Tensor<T>, Tensor<T>> subnet_apply<T>(                   \
      const FlowModel<T>&, int, int, const Tensor<T>&, const Tensor<T>&);     \
  template CouplingResult<T> coupling_forward<T>(                             \
      const FlowModel<T>&, int, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> coupling_inverse<T>(const FlowModel<T>&, int,            \
                                         const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> condition_pipeline<T>(const FlowModel<T>&,               \
                                           const audio::Waveform&, size_t);   \
  template ForwardResult<T> flow_forward<T>(                                  \
      const FlowModel<T>&, const audio::Waveform&, const audio::Waveform&);   \
  template audio::Waveform flow_inverse<T>(const FlowModel<T>&,               \
                                           const Tensor<T>&,                  \
                                           const audio::Waveform&);           \
  template double nll<T>(const Tensor<T>&, double, double);                   \
  template TapeForward<T> flow_forward_tape<T>(                               \
      const FlowModel<T>&, ad::Tape<T>&, const audio::Waveform&,              \
      const audio::Waveform&, double);                                        \
  template void save_checkpoint<T>(const std::filesystem::path&,              \
                                   const FlowModel<T>&);                      \
  template FlowModel<T> load_checkpoint<T>(const std::filesystem::path&);

FDN_INSTANTIATE_FLOW(float)
FDN_INSTANTIATE_FLOW(double)

#undef FDN_INSTANTIATE_FLOW

}  // namespace fdn::flow
