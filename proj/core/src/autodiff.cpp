#include "flowdenoise/autodiff.hpp"

#include <Eigen/LU>

#include <cmath>

#include "flowdenoise/errors.hpp"
#include "kernels.hpp"

namespace fdn::ad {

namespace {

// frames * log|det w| and the LU it came from; throws on near-singular w.
template <typename T>
double logdet_value(const Tensor<T>& w, int frames,
                    Eigen::PartialPivLU<kern::EMat<T>>* lu_out) {
  if (w.rows() != w.cols()) throw ShapeError("logdet: square matrix required");
  Eigen::PartialPivLU<kern::EMat<T>> lu(kern::cmap(w));
  double log_abs_det = 0.0;
  for (int i = 0; i < w.rows(); ++i) {
    const double d = std::abs(static_cast<double>(lu.matrixLU()(i, i)));
    if (d < 1e-12) throw NumericError("logdet: 1x1 weight is singular");
    log_abs_det += std::log(d);
  }
  if (lu_out != nullptr) *lu_out = std::move(lu);
  return frames * log_abs_det;
}

}  // namespace

template <typename T>
const char* Tape<T>::op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kPointwise: return "pointwise_conv";
    case Op::kDepthwise: return "depthwise_conv";
    case Op::kTconv: return "transposed_depthwise_conv";
    case Op::kGated: return "gated_activation";
    case Op::kAdd: return "add";
    case Op::kMul: return "mul";
    case Op::kExp: return "exp";
    case Op::kSliceRows: return "slice_rows";
    case Op::kConcatRows: return "concat_rows";
    case Op::kSqueeze: return "squeeze";
    case Op::kLogdet: return "logdet_frames";
    case Op::kSumAll: return "sum_all";
    case Op::kSumSquares: return "sum_squares";
    case Op::kCombine: return "combine_scalars";
  }
  return "unknown";
}

template <typename T>
int Tape<T>::push(Node node, Tensor<T> value) {
  bool req = false;
  auto mark = [&](int id) {
    if (id >= 0 && requires_[id]) req = true;
  };
  mark(node.a);
  mark(node.b);
  mark(node.c);
  for (const auto& [coeff, id] : node.lin) mark(id);
  nodes_.push_back(std::move(node));
  values_.push_back(std::move(value));
  grads_.emplace_back();
  requires_.push_back(req ? 1 : 0);
  return static_cast<int>(values_.size()) - 1;
}

template <typename T>
Var Tape<T>::input(Tensor<T> value, bool requires_grad) {
  nodes_.push_back(Node{});
  values_.push_back(std::move(value));
  grads_.emplace_back();
  requires_.push_back(requires_grad ? 1 : 0);
  return Var{static_cast<int>(values_.size()) - 1};
}

template <typename T>
void Tape<T>::check_operand(Var v, const char* op) const {
  if (!v.valid() || v.id >= static_cast<int>(values_.size()))
    throw ValueError(std::string("tape: invalid operand for ") + op);
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var v) const {
  check_operand(v, "value");
  return values_[v.id];
}

template <typename T>
const Tensor<T>& Tape<T>::grad(Var v) {
  check_operand(v, "grad");
  Tensor<T>& g = grads_[v.id];
  if (g.size() == 0)
    g = Tensor<T>(values_[v.id].rows(), values_[v.id].cols());
  return g;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buf(int id) {
  Tensor<T>& g = grads_[id];
  if (g.size() == 0) g = Tensor<T>(values_[id].rows(), values_[id].cols());
  return g;
}

template <typename T>
Var Tape<T>::pointwise(Var w, Var bias, Var x) {
  check_operand(w, "pointwise");
  check_operand(x, "pointwise");
  Tensor<T> out;
  kern::pointwise_forward(values_[w.id],
                          bias.valid() ? &values_[bias.id] : nullptr,
                          values_[x.id], out);
  Node n;
  n.op = Op::kPointwise;
  n.a = w.id;
  n.b = x.id;
  n.c = bias.valid() ? bias.id : -1;
  return Var{push(std::move(n), std::move(out))};
}

template <typename T>
Var Tape<T>::depthwise(Var kernel, Var bias, int dilation, Var x) {
  check_operand(kernel, "depthwise");
  check_operand(x, "depthwise");
  Tensor<T> out;
  kern::depthwise_forward(values_[kernel.id],
                          bias.valid() ? &values_[bias.id] : nullptr, dilation,
                          values_[x.id], out);
  Node n;
  n.op = Op::kDepthwise;
  n.a = kernel.id;
  n.b = x.id;
  n.c = bias.valid() ? bias.id : -1;
  n.i0 = dilation;
  return Var{push(std::move(n), std::move(out))};
}

template <typename T>
Var Tape<T>::tconv_depthwise(Var kernel, Var bias, int stride, int out_len,
                             Var x) {
  check_operand(kernel, "tconv");
  check_operand(x, "tconv");
  Tensor<T> out;
  kern::tconv_depthwise_forward(values_[kernel.id],
                                bias.valid() ? &values_[bias.id] : nullptr,
                                stride, out_len, values_[x.id], out);
  Node n;
  n.op = Op::kTconv;
  n.a = kernel.id;
  n.b = x.id;
  n.c = bias.valid() ? bias.id : -1;
  n.i0 = stride;
  n.i1 = out_len;
  return Var{push(std::move(n), std::move(out))};
}

template <typename T>
Var Tape<T>::gated(Var x) {
  check_operand(x, "gated");
  Tensor<T> out;
  kern::gated_forward(values_[x.id], out);
  Node n;
  n.op = Op::kGated;
  n.a = x.id;
  return Var{push(std::move(n), std::move(out))};
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  check_operand(a, "add");
  check_operand(b, "add");
  const Tensor<T>& va = values_[a.id];
  const Tensor<T>& vb = values_[b.id];
  if (!va.same_shape(vb)) throw ShapeError("add: shape mismatch");
  Tensor<T> out(va.rows(), va.cols());
  for (size_t i = 0; i < va.size(); ++i) out[i] = va[i] + vb[i];
  Node n;
  n.op = Op::kAdd;
  n.a = a.id;
  n.b = b.id;
  return Var{push(std::move(n), std::move(out))};
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  check_operand(a, "mul");
  check_operand(b, "mul");
  const Tensor<T>& va = values_[a.id];
  const Tensor<T>& vb = values_[b.id];
  if (!va.same_shape(vb)) throw ShapeError("mul: shape mismatch");
  Tensor<T> out(va.rows(), va.cols());
  for (size_t i = 0; i < va.size(); ++i) out[i] = va[i] * vb[i];
  Node n;
  n.op = Op::kMul;
  n.a = a.id;
  n.b = b.id;
  return Var{push(std::move(n), std::move(out))};
}

template <typename T>
Var Tape<T>::vexp(Var x) {
  check_operand(x, "exp");
  const Tensor<T>& vx = values_[x.id];
  Tensor<T> out(vx.rows(), vx.cols());
  for (size_t i = 0; i < vx.size(); ++i) out[i] = std::exp(vx[i]);
  Node n;
  n.op = Op::kExp;
  n.a = x.id;
  return Var{push(std::move(n), std::move(out))};
}

template <typename T>
Var Tape<T>::slice_rows(Var x, int row_begin, int row_end) {
  check_operand(x, "slice_rows");
  const Tensor<T>& vx = values_[x.id];
  if (row_begin < 0 || row_end > vx.rows() || row_begin >= row_end)
    throw ShapeError("slice_rows: bad range");
  Tensor<T> out(row_end - row_begin, vx.cols());
  std::copy(vx.data() + static_cast<size_t>(row_begin) * vx.cols(),
            vx.data() + static_cast<size_t>(row_end) * vx.cols(), out.data());
  Node n;
  n.op = Op::kSliceRows;
  n.a = x.id;
  n.i0 = row_begin;
  n.i1 = row_end;
  return Var{push(std::move(n), std::move(out))};
}

template <typename T>
Var Tape<T>::concat_rows(Var a, Var b) {
  check_operand(a, "concat_rows");
  check_operand(b, "concat_rows");
  const Tensor<T>& va = values_[a.id];
  const Tensor<T>& vb = values_[b.id];
  if (va.cols() != vb.cols()) throw ShapeError("concat_rows: column mismatch");
  Tensor<T> out(va.rows() + vb.rows(), va.cols());
  std::copy(va.data(), va.data() + va.size(), out.data());
  std::copy(vb.data(), vb.data() + vb.size(), out.data() + va.size());
  Node n;
  n.op = Op::kConcatRows;
  n.a = a.id;
  n.b = b.id;
  n.i0 = va.rows();
  return Var{push(std::move(n), std::move(out))};
}

template <typename T>
Var Tape<T>::squeeze(Var x, int g) {
  check_operand(x, "squeeze");
  Tensor<T> out;
  kern::squeeze_forward(values_[x.id], g, out);
  Node n;
  n.op = Op::kSqueeze;
  n.a = x.id;
  n.i0 = g;
  return Var{push(std::move(n), std::move(out))};
}

template <typename T>
Var Tape<T>::logdet_frames(Var w, int frames) {
  check_operand(w, "logdet_frames");
  const double v = logdet_value(
      values_[w.id], frames,
      static_cast<Eigen::PartialPivLU<kern::EMat<T>>*>(nullptr));
  Node n;
  n.op = Op::kLogdet;
  n.a = w.id;
  n.i0 = frames;
  return Var{push(std::move(n), Tensor<T>::scalar(static_cast<T>(v)))};
}

template <typename T>
Var Tape<T>::sum_all(Var x) {
  check_operand(x, "sum_all");
  const Tensor<T>& vx = values_[x.id];
  double acc = 0.0;
  for (size_t i = 0; i < vx.size(); ++i) acc += static_cast<double>(vx[i]);
  Node n;
  n.op = Op::kSumAll;
  n.a = x.id;
  return Var{push(std::move(n), Tensor<T>::scalar(static_cast<T>(acc)))};
}

template <typename T>
Var Tape<T>::sum_squares(Var x) {
  check_operand(x, "sum_squares");
  const Tensor<T>& vx = values_[x.id];
  double acc = 0.0;
  for (size_t i = 0; i < vx.size(); ++i) {
    const double v = static_cast<double>(vx[i]);
    acc += v * v;
  }
  Node n;
  n.op = Op::kSumSquares;
  n.a = x.id;
  return Var{push(std::move(n), Tensor<T>::scalar(static_cast<T>(acc)))};
}

template <typename T>
Var Tape<T>::combine_scalars(
    const std::vector<std::pair<double, Var>>& terms, double constant) {
  Node n;
  n.op = Op::kCombine;
  n.constant = constant;
  double acc = constant;
  for (const auto& [coeff, v] : terms) {
    check_operand(v, "combine_scalars");
    if (values_[v.id].size() != 1)
      throw ShapeError("combine_scalars: term is not scalar");
    acc += coeff * static_cast<double>(values_[v.id].item());
    n.lin.emplace_back(coeff, v.id);
  }
  return Var{push(std::move(n), Tensor<T>::scalar(static_cast<T>(acc)))};
}

template <typename T>
void Tape<T>::backward_node(int i) {
  const Node& n = nodes_[i];
  const Tensor<T>& g = grads_[i];
  auto want = [&](int id) { return id >= 0 && requires_[id]; };
  auto buf = [&](int id) -> Tensor<T>* {
    return want(id) ? &grad_buf(id) : nullptr;
  };
  switch (n.op) {
    case Op::kLeaf:
      return;
    case Op::kPointwise:
      kern::pointwise_backward(values_[n.a], values_[n.b], g, buf(n.a),
                               buf(n.c), buf(n.b));
      break;
    case Op::kDepthwise:
      kern::depthwise_backward(values_[n.a], n.i0, values_[n.b], g, buf(n.a),
                               buf(n.c), buf(n.b));
      break;
    case Op::kTconv:
      kern::tconv_depthwise_backward(values_[n.a], n.i0, values_[n.b], g,
                                     buf(n.a), buf(n.c), buf(n.b));
      break;
    case Op::kGated:
      if (want(n.a)) kern::gated_backward(values_[n.a], g, grad_buf(n.a));
      break;
    case Op::kAdd: {
      for (int id : {n.a, n.b}) {
        if (!want(id)) continue;
        Tensor<T>& gx = grad_buf(id);
        for (size_t k = 0; k < g.size(); ++k) gx[k] += g[k];
      }
      break;
    }
    case Op::kMul: {
      if (want(n.a)) {
        Tensor<T>& ga = grad_buf(n.a);
        const Tensor<T>& vb = values_[n.b];
        for (size_t k = 0; k < g.size(); ++k) ga[k] += g[k] * vb[k];
      }
      if (want(n.b)) {
        Tensor<T>& gb = grad_buf(n.b);
        const Tensor<T>& va = values_[n.a];
        for (size_t k = 0; k < g.size(); ++k) gb[k] += g[k] * va[k];
      }
      break;
    }
    case Op::kExp: {
      if (want(n.a)) {
        Tensor<T>& gx = grad_buf(n.a);
        const Tensor<T>& y = values_[i];
        for (size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * y[k];
      }
      break;
    }
    case Op::kSliceRows: {
      if (want(n.a)) {
        Tensor<T>& gx = grad_buf(n.a);
        const size_t cols = gx.cols();
        T* dst = gx.data() + static_cast<size_t>(n.i0) * cols;
        for (size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
      }
      break;
    }
    case Op::kConcatRows: {
      const size_t split = static_cast<size_t>(n.i0) * g.cols();
      if (want(n.a)) {
        Tensor<T>& ga = grad_buf(n.a);
        for (size_t k = 0; k < split; ++k) ga[k] += g[k];
      }
      if (want(n.b)) {
        Tensor<T>& gb = grad_buf(n.b);
        for (size_t k = split; k < g.size(); ++k) gb[k - split] += g[k];
      }
      break;
    }
    case Op::kSqueeze: {
      if (want(n.a)) {
        Tensor<T>& gx = grad_buf(n.a);
        Tensor<T> unsq;
        kern::unsqueeze_forward(g, n.i0, unsq);
        for (size_t k = 0; k < unsq.size(); ++k) gx[k] += unsq[k];
      }
      break;
    }
    case Op::kLogdet: {
      if (want(n.a)) {
        Eigen::PartialPivLU<kern::EMat<T>> lu;
        logdet_value(values_[n.a], n.i0, &lu);
        const kern::EMat<T> winv_t = lu.inverse().transpose();
        Tensor<T>& gw = grad_buf(n.a);
        const T scale = g.item() * static_cast<T>(n.i0);
        for (int r = 0; r < gw.rows(); ++r)
          for (int c = 0; c < gw.cols(); ++c) gw(r, c) += scale * winv_t(r, c);
      }
      break;
    }
    case Op::kSumAll: {
      if (want(n.a)) {
        Tensor<T>& gx = grad_buf(n.a);
        const T gs = g.item();
        for (size_t k = 0; k < gx.size(); ++k) gx[k] += gs;
      }
      break;
    }
    case Op::kSumSquares: {
      if (want(n.a)) {
        Tensor<T>& gx = grad_buf(n.a);
        const Tensor<T>& vx = values_[n.a];
        const T gs = g.item();
        for (size_t k = 0; k < gx.size(); ++k) gx[k] += T(2) * gs * vx[k];
      }
      break;
    }
    case Op::kCombine: {
      const T gs = g.item();
      for (const auto& [coeff, id] : n.lin) {
        if (!want(id)) continue;
        grad_buf(id)[0] += static_cast<T>(coeff) * gs;
      }
      break;
    }
  }
  // A non-finite gradient is reported at the op that produced it.
  auto check = [&](int id) {
    if (id >= 0 && grads_[id].size() != 0 && !grads_[id].all_finite())
      throw NumericError(std::string("non-finite gradient out of op '") +
                         op_name(n.op) + "' at node " + std::to_string(i));
  };
  check(n.a);
  check(n.b);
  check(n.c);
  for (const auto& [coeff, id] : n.lin) check(id);
}

template <typename T>
void Tape<T>::backward(Var loss) {
  check_operand(loss, "backward");
  if (values_[loss.id].size() != 1)
    throw ShapeError("backward: loss must be scalar");
  if (ran_backward_) throw ValueError("backward: tape already consumed");
  ran_backward_ = true;
  grad_buf(loss.id)[0] = T(1);
  for (int i = loss.id; i >= 0; --i) {
    if (!requires_[i]) continue;
    if (grads_[i].size() == 0) continue;  // not on the path to the loss
    backward_node(i);
    // The output gradient of an interior node is dead once consumed.
    if (nodes_[i].op != Op::kLeaf && i != loss.id) grads_[i] = Tensor<T>();
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace fdn::ad
