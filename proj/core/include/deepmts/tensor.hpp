#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "deepmts/error.hpp"

namespace deepmts {

using Shape = std::vector<std::size_t>;

/// Fixed 64-byte alignment. Vectorised reductions peel differently for
/// different start addresses, so a varying alignment changes float summation
/// order and breaks run-to-run reproducibility.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

/// Dense row-major tensor. Activations are channel-first:
/// (batch, channels, depth, height, width).
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(element_count(shape_), fill) {}
  Tensor(Shape shape, const std::vector<T>& values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    check_size();
  }
  Tensor(Shape shape, AlignedVector<T> values) : shape_(std::move(shape)), data_(std::move(values)) { check_size(); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (element_count(shape) != size()) {
      throw ValidationError("reshape " + to_string(shape_) + " -> " + to_string(shape));
    }
    return Tensor(std::move(shape), AlignedVector<T>(data_));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    AlignedVector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  void check_size() const {
    if (data_.size() != element_count(shape_)) {
      throw ValidationError("tensor: " + std::to_string(data_.size()) + " values for shape " + to_string(shape_));
    }
  }

  Shape shape_;
  AlignedVector<T> data_;
};

/// Spatial view helpers for 5-D activations.
struct Volume5 {
  std::size_t n, c, d, h, w;
  std::size_t spatial() const noexcept { return d * h * w; }
};

Volume5 as_volume5(const Shape& shape);

}  // namespace deepmts
