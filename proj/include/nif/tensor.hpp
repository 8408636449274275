#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nif {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& shape);
int64_t shape_numel(const Shape& shape);

// Cache-line aligned so vectorized kernels see the same alignment for
// every buffer, which keeps floating-point reductions reproducible.
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

using Storage = std::vector<double, AlignedAllocator<double>>;

// Dense row-major array of doubles. Value type; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, const std::vector<double>& data);
  Tensor(Shape shape, Storage data);
  Tensor(Shape shape, std::initializer_list<double> data) : Tensor(std::move(shape), Storage(data)) {}

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  // Negative axes count from the back.
  int64_t dim(int axis) const;
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  double& at(std::initializer_list<int64_t> idx);
  double at(std::initializer_list<int64_t> idx) const;

  Tensor reshaped(Shape shape) const;
  void fill(double v);
  bool all_finite() const;
  double item() const;

  // Elementwise helpers used outside of autograd.
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

 private:
  int64_t offset(std::initializer_list<int64_t> idx) const;

  Shape shape_;
  Storage data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

double max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& t);
double sum_of(const Tensor& t);
double mean_of(const Tensor& t);

// FNV-1a over the raw bytes; used for latent and weight checksums.
uint64_t checksum(const Tensor& t);
uint64_t checksum_bytes(const void* data, size_t n, uint64_t seed = 1469598103934665603ULL);

}  // namespace nif
