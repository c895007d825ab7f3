#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace effscale {

enum class ErrorKind { invalid, io };

// Every failure raised by the library. `kind` separates bad input (exit code 1
// in the CLI) from filesystem trouble (exit code 2).
class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(ErrorKind::invalid, msg); }
[[noreturn]] inline void fail_io(const std::string& msg) { throw Error(ErrorKind::io, msg); }

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

// Dense row-major array. Weight matrices are stored as [in, out] so that a
// row vector x maps to x * W; axis 0 is the input axis, axis 1 the output axis.
template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T{0}) : shape(std::move(s)), data(element_count(shape), fill) {}
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != element_count(shape)) fail("tensor data does not match shape " + shape_string(shape));
  }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }

  T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  bool operator==(const Tensor&) const = default;
};

// Name-ordered so that iteration (initialization, serialization, optimizer
// sweeps) is deterministic.
template <class T>
using TensorMap = std::map<std::string, Tensor<T>>;

template <class U, class T>
Tensor<U> tensor_cast(const Tensor<T>& t) {
  Tensor<U> out;
  out.shape = t.shape;
  out.data.assign(t.data.begin(), t.data.end());
  return out;
}

template <class T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>(a.data[i]) !=
        std::bit_cast<std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>(b.data[i]))
      return false;
  return true;
}

template <class T>
bool all_finite(std::span<const T> v) {
  for (T x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

// Summation that splits even-length ranges exactly at the midpoint. A range of
// the form [x; x] therefore sums to exactly twice the sum of x, which makes
// width doubling bit-exact through norms and linear layers.
template <class T, class F>
T pairwise_sum(std::size_t begin, std::size_t n, F&& term) {
  if (n == 1) return term(begin);
  if (n % 2 == 1 && n <= 15) {
    T s = term(begin);
    for (std::size_t i = 1; i < n; ++i) s += term(begin + i);
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum<T>(begin, half, term) + pairwise_sum<T>(begin + half, n - half, term);
}

namespace detail {

template <class T>
void vecmat_rec(const T* x, const T* w, std::size_t begin, std::size_t n, std::size_t out, T* acc, T* scratch) {
  if (n == 1 || (n % 2 == 1 && n <= 15)) {
    const T* row = w + begin * out;
    const T xv = x[begin];
    for (std::size_t o = 0; o < out; ++o) acc[o] = xv * row[o];
    for (std::size_t i = 1; i < n; ++i) {
      const T* r = w + (begin + i) * out;
      const T xi = x[begin + i];
      for (std::size_t o = 0; o < out; ++o) acc[o] += xi * r[o];
    }
    return;
  }
  const std::size_t half = n / 2;
  vecmat_rec(x, w, begin, half, out, acc, scratch + out);
  T* right = scratch;
  vecmat_rec(x, w, begin + half, n - half, out, right, scratch + out);
  for (std::size_t o = 0; o < out; ++o) acc[o] += right[o];
}

}  // namespace detail

// y = x * W (+ bias), W stored [in, out]; reduction over `in` uses the same
// midpoint splitting as pairwise_sum.
template <class T>
void vecmat(std::span<const T> x, const Tensor<T>& w, std::span<T> y, const Tensor<T>* bias = nullptr) {
  const std::size_t in = w.rows(), out = w.cols();
  std::size_t depth = 1;
  for (std::size_t n = in; n > 1; n = (n + 1) / 2) ++depth;
  thread_local std::vector<T> scratch;
  scratch.resize(out * (depth + 1));
  detail::vecmat_rec(x.data(), w.data.data(), 0, in, out, y.data(), scratch.data());
  if (bias)
    for (std::size_t o = 0; o < out; ++o) y[o] += bias->data[o];
}

// Seeded generator with a portable normal sampler (std::normal_distribution is
// implementation-defined, which would break cross-toolchain determinism).
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  std::uint64_t next() { return engine_(); }

  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace effscale
