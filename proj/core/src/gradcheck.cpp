#include "flowdenoise/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <utility>

#include "flowdenoise/autodiff.hpp"
#include "flowdenoise/flow.hpp"
#include "flowdenoise/rng.hpp"
#include "flowdenoise/tensor.hpp"

namespace fdn::gradcheck {

namespace {

using ad::Tape;
using ad::Var;

constexpr double kStep = 1e-4;

double rel_err(double got, double want) {
  const double denom = std::max(1e-6, std::abs(got) + std::abs(want));
  return std::abs(got - want) / denom;
}

Tensor<double> random_tensor(Rng& rng, int rows, int cols, double lo = -1.0,
                             double hi = 1.0) {
  Tensor<double> t(rows, cols);
  for (size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// One primitive under test: differentiable inputs plus a builder that turns
// their leaves into a scalar loss on the tape.
struct Case {
  std::string name;
  std::vector<Tensor<double>> inputs;
  std::function<Var(Tape<double>&, const std::vector<Var>&)> build;
};

double eval_loss(const Case& c, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(tape.input(t, false));
  return tape.value(c.build(tape, leaves)).item();
}

CheckRow check_case(const Case& c) {
  Tape<double> tape;
  std::vector<Var> leaves;
  leaves.reserve(c.inputs.size());
  for (const auto& t : c.inputs) leaves.push_back(tape.input(t, true));
  tape.backward(c.build(tape, leaves));

  std::vector<Tensor<double>> grads;
  grads.reserve(leaves.size());
  for (Var v : leaves) grads.push_back(tape.grad(v));

  CheckRow row;
  row.name = c.name;
  std::vector<Tensor<double>> probe = c.inputs;
  for (size_t i = 0; i < probe.size(); ++i) {
    for (size_t e = 0; e < probe[i].size(); ++e) {
      const double saved = probe[i][e];
      probe[i][e] = saved + kStep;
      const double up = eval_loss(c, probe);
      probe[i][e] = saved - kStep;
      const double down = eval_loss(c, probe);
      probe[i][e] = saved;
      const double fd = (up - down) / (2.0 * kStep);
      row.max_rel_err = std::max(row.max_rel_err, rel_err(grads[i][e], fd));
      ++row.n_checked;
    }
  }
  return row;
}

// Reduces a matrix output to a scalar with fixed random weights so every
// output entry influences the loss.
Var weighted_sum(Tape<double>& tape, Var y, const Tensor<double>& weights) {
  return tape.sum_all(tape.mul(y, tape.input(weights, false)));
}

std::vector<Case> primitive_cases(uint64_t seed) {
  std::vector<Case> cases;
  int stream = 0;
  const auto next_rng = [&] { return Rng(Rng::derive(seed, ++stream)); };

  {
    Rng rng = next_rng();
    Case c;
    c.name = "pointwise";
    c.inputs = {random_tensor(rng, 3, 4), random_tensor(rng, 1, 3),
                random_tensor(rng, 4, 7)};
    Tensor<double> w = random_tensor(rng, 3, 7);
    c.build = [w](Tape<double>& t, const std::vector<Var>& in) {
      return weighted_sum(t, t.pointwise(in[0], in[1], in[2]), w);
    };
    cases.push_back(std::move(c));
  }
  for (int dilation : {1, 2}) {
    Rng rng = next_rng();
    Case c;
    c.name = "depthwise_dil" + std::to_string(dilation);
    c.inputs = {random_tensor(rng, 3, 3), random_tensor(rng, 1, 3),
                random_tensor(rng, 3, 9)};
    Tensor<double> w = random_tensor(rng, 3, 9);
    c.build = [w, dilation](Tape<double>& t, const std::vector<Var>& in) {
      return weighted_sum(t, t.depthwise(in[0], in[1], dilation, in[2]), w);
    };
    cases.push_back(std::move(c));
  }
  for (int out_len : {15, 20}) {  // raw length 18: one crop, one extension
    Rng rng = next_rng();
    Case c;
    c.name = "tconv_out" + std::to_string(out_len);
    c.inputs = {random_tensor(rng, 2, 6), random_tensor(rng, 1, 2),
                random_tensor(rng, 2, 5)};
    Tensor<double> w = random_tensor(rng, 2, out_len);
    c.build = [w, out_len](Tape<double>& t, const std::vector<Var>& in) {
      return weighted_sum(t, t.tconv_depthwise(in[0], in[1], 3, out_len, in[2]),
                          w);
    };
    cases.push_back(std::move(c));
  }
  {
    Rng rng = next_rng();
    Case c;
    c.name = "gated";
    c.inputs = {random_tensor(rng, 4, 6)};
    Tensor<double> w = random_tensor(rng, 2, 6);
    c.build = [w](Tape<double>& t, const std::vector<Var>& in) {
      return weighted_sum(t, t.gated(in[0]), w);
    };
    cases.push_back(std::move(c));
  }
  {
    Rng rng = next_rng();
    Case c;
    c.name = "add";
    c.inputs = {random_tensor(rng, 3, 5), random_tensor(rng, 3, 5)};
    Tensor<double> w = random_tensor(rng, 3, 5);
    c.build = [w](Tape<double>& t, const std::vector<Var>& in) {
      return weighted_sum(t, t.add(in[0], in[1]), w);
    };
    cases.push_back(std::move(c));
  }
  {
    Rng rng = next_rng();
    Case c;
    c.name = "mul";
    c.inputs = {random_tensor(rng, 3, 5), random_tensor(rng, 3, 5)};
    Tensor<double> w = random_tensor(rng, 3, 5);
    c.build = [w](Tape<double>& t, const std::vector<Var>& in) {
      return weighted_sum(t, t.mul(in[0], in[1]), w);
    };
    cases.push_back(std::move(c));
  }
  {
    Rng rng = next_rng();
    Case c;
    c.name = "vexp";
    c.inputs = {random_tensor(rng, 3, 4, -0.8, 0.8)};
    Tensor<double> w = random_tensor(rng, 3, 4);
    c.build = [w](Tape<double>& t, const std::vector<Var>& in) {
      return weighted_sum(t, t.vexp(in[0]), w);
    };
    cases.push_back(std::move(c));
  }
  {
    Rng rng = next_rng();
    Case c;
    c.name = "slice_rows";
    c.inputs = {random_tensor(rng, 5, 4)};
    Tensor<double> w = random_tensor(rng, 3, 4);
    c.build = [w](Tape<double>& t, const std::vector<Var>& in) {
      return weighted_sum(t, t.slice_rows(in[0], 1, 4), w);
    };
    cases.push_back(std::move(c));
  }
  {
    Rng rng = next_rng();
    Case c;
    c.name = "concat_rows";
    c.inputs = {random_tensor(rng, 2, 4), random_tensor(rng, 3, 4)};
    Tensor<double> w = random_tensor(rng, 5, 4);
    c.build = [w](Tape<double>& t, const std::vector<Var>& in) {
      return weighted_sum(t, t.concat_rows(in[0], in[1]), w);
    };
    cases.push_back(std::move(c));
  }
  {
    Rng rng = next_rng();
    Case c;
    c.name = "squeeze";
    c.inputs = {random_tensor(rng, 2, 12)};
    Tensor<double> w = random_tensor(rng, 6, 4);
    c.build = [w](Tape<double>& t, const std::vector<Var>& in) {
      return weighted_sum(t, t.squeeze(in[0], 3), w);
    };
    cases.push_back(std::move(c));
  }
  {
    Rng rng = next_rng();
    Case c;
    c.name = "logdet_frames";
    Tensor<double> w(3, 3);
    w.fill(0.0);
    for (int i = 0; i < 3; ++i) w(i, i) = 1.0;
    for (size_t e = 0; e < w.size(); ++e) w[e] += rng.uniform(-0.2, 0.2);
    c.inputs = {w};
    c.build = [](Tape<double>& t, const std::vector<Var>& in) {
      return t.logdet_frames(in[0], 7);
    };
    cases.push_back(std::move(c));
  }
  {
    Rng rng = next_rng();
    Case c;
    c.name = "sum_all";
    c.inputs = {random_tensor(rng, 4, 3)};
    c.build = [](Tape<double>& t, const std::vector<Var>& in) {
      return t.sum_all(in[0]);
    };
    cases.push_back(std::move(c));
  }
  {
    Rng rng = next_rng();
    Case c;
    c.name = "sum_squares";
    c.inputs = {random_tensor(rng, 4, 3)};
    c.build = [](Tape<double>& t, const std::vector<Var>& in) {
      return t.sum_squares(in[0]);
    };
    cases.push_back(std::move(c));
  }
  {
    Rng rng = next_rng();
    Case c;
    c.name = "combine_scalars";
    c.inputs = {random_tensor(rng, 2, 3), random_tensor(rng, 2, 3)};
    c.build = [](Tape<double>& t, const std::vector<Var>& in) {
      return t.combine_scalars(
          {{0.7, t.sum_all(in[0])}, {-0.3, t.sum_squares(in[1])}}, 1.234);
    };
    cases.push_back(std::move(c));
  }
  return cases;
}

// End-to-end: tape gradients of the tiny-flow NLL against finite differences
// computed with the independent evaluation path (flow_forward + nll).
CheckRow check_flow_nll(uint64_t seed, double corruption) {
  flow::FlowConfig cfg;
  cfg.n_blocks = 2;
  cfg.g = 4;
  cfg.mode = flow::CouplingMode::kDouble;
  cfg.cond_kind = feat::FeatureKind::kTime;
  cfg.hidden_channels = 12;
  cfg.n_layers = 2;
  cfg.cond_channels = 6;

  flow::FlowModel<double> m(cfg);
  m.randomize_parameters(Rng::derive(seed, 100));

  // Jitter every parameter (including the zero-initialized output layers) so
  // no gradient path is identically zero at the probe point.
  Rng jitter(Rng::derive(seed, 101));
  for (size_t i = 0; i < m.n_params(); ++i) {
    Tensor<double>& p = m.param(static_cast<int>(i));
    for (size_t e = 0; e < p.size(); ++e) p[e] += jitter.uniform(-0.05, 0.05);
  }

  Rng data(Rng::derive(seed, 102));
  audio::Waveform x, cond;
  x.sample_rate = cfg.sample_rate;
  cond.sample_rate = cfg.sample_rate;
  const size_t n = 64;
  for (size_t i = 0; i < n; ++i) {
    x.samples.push_back(0.3 * data.normal());
    cond.samples.push_back(0.3 * data.normal());
  }
  const double sigma = 0.9;

  Tape<double> tape;
  flow::TapeForward<double> tf = flow::flow_forward_tape(m, tape, x, cond,
                                                         sigma);
  tape.backward(tf.nll);
  std::vector<Tensor<double>> grads;
  grads.reserve(tf.params.size());
  for (Var v : tf.params) grads.push_back(tape.grad(v));
  if (corruption != 0.0) grads[0][0] += corruption;

  const auto eval_nll = [&] {
    flow::ForwardResult<double> fw = flow::flow_forward(m, x, cond);
    return flow::nll(fw.z, fw.total_logdet, sigma);
  };

  CheckRow row;
  row.name = "flow_nll";
  for (size_t i = 0; i < m.n_params(); ++i) {
    Tensor<double>& p = m.param(static_cast<int>(i));
    for (size_t e = 0; e < p.size(); ++e) {
      const double saved = p[e];
      p[e] = saved + kStep;
      const double up = eval_nll();
      p[e] = saved - kStep;
      const double down = eval_nll();
      p[e] = saved;
      const double fd = (up - down) / (2.0 * kStep);
      row.max_rel_err = std::max(row.max_rel_err, rel_err(grads[i][e], fd));
      ++row.n_checked;
    }
  }
  return row;
}

}  // namespace

Report run_suite(uint64_t seed, double corruption) {
  Report report;
  for (const Case& c : primitive_cases(seed)) {
    report.rows.push_back(check_case(c));
  }
  report.rows.push_back(check_flow_nll(seed, corruption));

  for (const CheckRow& row : report.rows) {
    if (row.max_rel_err >= report.max_rel_err) {
      report.max_rel_err = row.max_rel_err;
      report.worst = row.name;
    }
  }
  return report;
}

}  // namespace fdn::gradcheck
