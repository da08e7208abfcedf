#pragma once

// Eager reverse-mode tape over the dense primitives used by the flow. Each
// op computes its value immediately and records enough to accumulate
// gradients in reverse creation order. Single threaded; accumulation order is
// fixed by construction, so gradients are bitwise reproducible.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "flowdenoise/tensor.hpp"

namespace fdn::ad {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
 public:
  // Leaf value. Gradients are accumulated only for leaves created with
  // requires_grad=true and for ops reachable from them.
  Var input(Tensor<T> value, bool requires_grad);

  const Tensor<T>& value(Var v) const;
  // Zero tensor if the var was never touched by backward.
  const Tensor<T>& grad(Var v);

  // w: Cout x Cin (optionally bias 1 x Cout), x: Cin x T.
  Var pointwise(Var w, Var bias, Var x);
  // kernel: C x k, taps centered, zero "same" padding.
  Var depthwise(Var kernel, Var bias, int dilation, Var x);
  // kernel: C x k, output cropped/zero-extended to out_len columns.
  Var tconv_depthwise(Var kernel, Var bias, int stride, int out_len, Var x);
  Var gated(Var x);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var vexp(Var x);
  Var slice_rows(Var x, int row_begin, int row_end);
  Var concat_rows(Var a, Var b);
  Var squeeze(Var x, int g);
  // Scalar (1x1) node: frames * log|det w|; throws if |det| < 1e-12.
  Var logdet_frames(Var w, int frames);
  // Scalars with f64 accumulation.
  Var sum_all(Var x);
  Var sum_squares(Var x);
  // Scalar node: sum_i coeff_i * scalar_var_i + constant.
  Var combine_scalars(const std::vector<std::pair<double, Var>>& terms,
                      double constant);

  // Reverse pass from a scalar loss; seeds d(loss)/d(loss) = 1. Throws
  // NumericError naming the op if any produced gradient is non-finite.
  void backward(Var loss);

  size_t size() const { return values_.size(); }

 private:
  enum class Op : uint8_t {
    kLeaf,
    kPointwise,
    kDepthwise,
    kTconv,
    kGated,
    kAdd,
    kMul,
    kExp,
    kSliceRows,
    kConcatRows,
    kSqueeze,
    kLogdet,
    kSumAll,
    kSumSquares,
    kCombine,
  };

  struct Node {
    Op op = Op::kLeaf;
    int a = -1, b = -1, c = -1;  // operand ids; c is the optional bias
    int i0 = 0, i1 = 0;          // op-specific integers
    std::vector<std::pair<double, int>> lin;  // combine_scalars terms
    double constant = 0.0;
  };

  int push(Node node, Tensor<T> value);
  Tensor<T>& grad_buf(int id);
  void check_operand(Var v, const char* op) const;
  void backward_node(int i);
  static const char* op_name(Op op);

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> values_;
  std::vector<Tensor<T>> grads_;
  std::vector<char> requires_;
  bool ran_backward_ = false;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace fdn::ad
