#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <new>
#include <vector>

namespace fdn {

// 64-byte aligned storage. Keeps vectorized reduction order a function of
// shape alone, so results are bitwise reproducible across allocations.
template <typename T>
struct AlignedAlloc {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAlloc() = default;
  template <typename U>
  AlignedAlloc(const AlignedAlloc<U>&) {}

  T* allocate(size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAlloc<U>&) const {
    return true;
  }
};

// Dense row-major matrix. Rows index channels, columns index time frames;
// a scalar is stored as 1x1 and a flat vector as 1xN.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int rows, int cols)
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, T(0)) {
    assert(rows >= 0 && cols >= 0);
  }

  static Tensor scalar(T v) {
    Tensor t(1, 1);
    t.data_[0] = v;
    return t;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator()(int r, int c) {
    assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
    return data_[static_cast<size_t>(r) * cols_ + c];
  }
  T operator()(int r, int c) const {
    assert(r >= 0 && r < rows_ && c >= 0 && c < cols_);
    return data_[static_cast<size_t>(r) * cols_ + c];
  }

  T& operator[](size_t i) { return data_[i]; }
  T operator[](size_t i) const { return data_[i]; }

  void fill(T v) { data_.assign(data_.size(), v); }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Single scalar held by a 1x1 tensor.
  T item() const {
    assert(size() == 1);
    return data_[0];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(rows_, cols_);
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<T, AlignedAlloc<T>> data_;
};

}  // namespace fdn
