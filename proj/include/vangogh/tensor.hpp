#pragma once

#include <algorithm>
#include <cstdint>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vangogh/error.hpp"

namespace vangogh {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ')';
  return os.str();
}

inline int64_t normalize_axis(int64_t axis, int64_t rank) {
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, Errc::shape_mismatch,
          "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return axis;
}

// Every buffer starts on a 64-byte boundary. Vectorised kernels peel a
// scalar prologue up to the first aligned element, so a fixed alignment keeps
// summation order, and hence results, independent of where the heap put it.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Storage = std::vector<T, AlignedAllocator<T>>;

// Dense row-major tensor. Owns its storage; copies are deep.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(static_cast<size_t>(shape_numel(shape_)), fill) {}

  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    require(static_cast<int64_t>(data_.size()) == shape_numel(shape_), Errc::shape_mismatch,
            "tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  int64_t dim() const noexcept { return static_cast<int64_t>(shape_.size()); }
  int64_t size(int64_t axis) const { return shape_[normalize_axis(axis, dim())]; }
  int64_t numel() const noexcept { return static_cast<int64_t>(data_.size()); }
  bool allocated() const noexcept { return !data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  Storage<T>& storage() noexcept { return data_; }
  const Storage<T>& storage() const noexcept { return data_; }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T item() const {
    require(data_.size() == 1, Errc::shape_mismatch, "item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshape(Shape s) const& {
    Tensor r = *this;
    return std::move(r).reshape(std::move(s));
  }

  Tensor reshape(Shape s) && {
    require(shape_numel(s) == numel(), Errc::shape_mismatch,
            "cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    shape_ = std::move(s);
    return std::move(*this);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Storage<T> data_;
};

}  // namespace vangogh
