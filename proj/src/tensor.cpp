#include "rlrr/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

#include "rlrr/kernels.hpp"

namespace rlrr {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(numel(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_str(shape_) + " holds " +
                         std::to_string(numel(shape_)) + " elements, got " +
                         std::to_string(data_.size()));
  }
}

template <typename T>
Tensor<T> Tensor<T>::matrix(std::size_t rows, std::size_t cols,
                            std::initializer_list<T> values) {
  return Tensor(Shape{rows, cols}, std::vector<T>(values));
}

template <typename T>
Tensor<T> Tensor<T>::vector(std::initializer_list<T> values) {
  return Tensor(Shape{values.size()}, std::vector<T>(values));
}

template <typename T>
Tensor<T> Tensor<T>::identity(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = T(1);
  return t;
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  return shape_.size() >= 2 ? numel(shape_) / shape_.back() : 1;
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  return shape_.empty() ? 1 : shape_.back();
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](T v) { return std::isfinite(v); });
}

template <typename T>
bool Tensor<T>::identical(const Tensor& other) const {
  return shape_ == other.shape_ &&
         (data_.empty() || std::memcmp(data_.data(), other.data_.data(),
                                       data_.size() * sizeof(T)) == 0);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> out(Shape{n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents differ for " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor<T> out(Shape{a.rows(), b.cols()});
  kernels::ops<T>().gemm(a.rows(), a.cols(), b.cols(), a.data().data(),
                         b.data().data(), out.data().data());
  return out;
}

namespace {
template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, const char* what, F f) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shapes differ " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}
}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "add", [](T x, T y) { return x + y; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "sub", [](T x, T y) { return x - y; });
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  return zip(a, b, "hadamard", [](T x, T y) { return x * y; });
}

template <typename T>
Tensor<T> scaled(const Tensor<T>& a, T c) {
  Tensor<T> out = a;
  for (T& v : out.storage()) v *= c;
  return out;
}

template <typename T>
T frobenius(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v * v;
  return std::sqrt(s);
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) {
    throw DimensionError("max_abs_diff: sizes differ " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
  if (c0 > c1 || c1 > a.cols()) {
    throw DimensionError("slice_cols: range out of bounds for " +
                         shape_str(a.shape()));
  }
  Tensor<T> out(Shape{a.rows(), c1 - c0});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = c0; j < c1; ++j) out.at(i, j - c0) = a.at(i, j);
  return out;
}

#define RLRR_INSTANTIATE(T)                                               \
  template class Tensor<T>;                                               \
  template Tensor<T> transpose(const Tensor<T>&);                         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> hadamard(const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> scaled(const Tensor<T>&, T);                         \
  template T frobenius(const Tensor<T>&);                                 \
  template T max_abs_diff(const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);

RLRR_INSTANTIATE(float)
RLRR_INSTANTIATE(double)

}  // namespace rlrr
