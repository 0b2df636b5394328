#pragma once

// Dense row-major tensors, the deterministic RNG, and the primitive numeric
// operations the rest of the library is built on.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qghc/error.hpp"

namespace qghc {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline void check_shape(const Shape& s) {
  if (s.empty()) throw ShapeError("invalid shape: rank must be >= 1");
  for (auto e : s)
    if (e == 0) throw ShapeError("invalid shape " + shape_str(s) + ": zero extent");
}

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), T{0}); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), T{1}); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = T{1};
    return t;
  }

  bool empty() const noexcept { return data_.empty(); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& vec() noexcept { return data_; }
  const std::vector<T>& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshape(Shape s) const {
    check_shape(s);
    if (shape_numel(s) != numel())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> d(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(d));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) throw ShapeError("index rank mismatch");
    std::size_t off = 0, k = 0;
    for (auto i : idx) {
      if (i >= shape_[k]) throw IndexError("index out of range");
      off = off * shape_[k++] + i;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

// Portable deterministic generator: std::mt19937_64, whose output sequence is
// fixed by the standard. Reals take the top 53 bits; integers use rejection
// sampling, so no implementation-defined distribution is involved.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 1) : seed_(seed), eng_(seed) {}

  // Independent stream for (seed, stream), via std::seed_seq (also fully
  // specified by the standard).
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream),
                      static_cast<std::uint32_t>(stream >> 32)};
    Rng r(seed);
    r.eng_.seed(seq);
    return r;
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return eng_(); }

  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ConfigError("Rng::below(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do x = eng_();
    while (x >= limit);
    return x % n;
  }

  // Box-Muller; only used for test fixtures.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) std::swap(first[i - 1], first[below(i)]);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 eng_;
};

template <class T>
Tensor<T> init_kaiming_uniform(const Shape& shape, std::size_t fan_in, Rng& rng) {
  if (fan_in < 1) throw ConfigError("fan_in must be >= 1");
  Tensor<T> t(shape);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <class T>
Tensor<T> uniform_tensor(const Shape& shape, double lo, double hi, Rng& rng) {
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// ---------------------------------------------------------------------------
// Primitive math

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<T> c({M, N});
  const T* A = a.data().data();
  const T* B = b.data().data();
  T* C = c.data().data();
  for (std::size_t i = 0; i < M; ++i) {
    T* crow = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T aik = A[i * K + k];
      if (aik == T{0}) continue;
      const T* brow = B + k * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose2d expects rank 2");
  const std::size_t M = a.dim(0), N = a.dim(1);
  Tensor<T> t({N, M});
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) t[j * M + i] = a[i * N + j];
  return t;
}

enum class Ewise { add, mul, relu, scale };

namespace detail {
template <class T, class F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, F f, const char* name) {
  if (a.shape() == b.shape()) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  if (b.numel() == 1) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[0]);
    return out;
  }
  if (a.numel() == 1) {
    Tensor<T> out(b.shape());
    for (std::size_t i = 0; i < b.numel(); ++i) out[i] = f(a[0], b[i]);
    return out;
  }
  throw ShapeError(std::string(name) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, [](T x, T y) { return x + y; }, "add");
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::zip(a, b, [](T x, T y) { return x * y; }, "mul");
}
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] > T{0} ? a[i] : T{0};
  return out;
}
template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  return out;
}

// Dispatcher over the four elementwise kinds. `b` is ignored for relu; for
// scale it must hold a single element.
template <class T>
Tensor<T> ewise(Ewise op, const Tensor<T>& a, const Tensor<T>& b = {}) {
  switch (op) {
    case Ewise::add: return add(a, b);
    case Ewise::mul: return mul(a, b);
    case Ewise::relu: return relu(a);
    case Ewise::scale:
      if (b.numel() != 1) throw ShapeError("scale expects a scalar operand");
      return scale(a, b[0]);
  }
  throw ConfigError("unknown elementwise op");
}

enum class Reduce { sum, mean, max };

namespace detail {
// Splits `shape` into kept / reduced axes and returns, for every flat input
// index, the flat output index.
inline std::vector<std::size_t> reduce_index_map(const Shape& shape, const std::vector<std::size_t>& axes,
                                                 Shape& out_shape, std::size_t& group) {
  std::vector<bool> reduced(shape.size(), false);
  for (auto ax : axes) {
    if (ax >= shape.size()) throw ShapeError("reduce: axis " + std::to_string(ax) + " out of range");
    if (reduced[ax]) throw ShapeError("reduce: repeated axis " + std::to_string(ax));
    reduced[ax] = true;
  }
  out_shape.clear();
  group = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (reduced[i])
      group *= shape[i];
    else
      out_shape.push_back(shape[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);

  const std::size_t n = shape_numel(shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < shape.size(); ++i)
      if (!reduced[i]) o = o * shape[i] + idx[i];
    map[flat] = o;
    for (std::size_t i = shape.size(); i-- > 0;) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }
  return map;
}
}  // namespace detail

template <class T>
Tensor<T> reduce(const Tensor<T>& t, const std::vector<std::size_t>& axes, Reduce kind) {
  Shape out_shape;
  std::size_t group = 0;
  const auto map = detail::reduce_index_map(t.shape(), axes, out_shape, group);
  Tensor<T> out(out_shape, kind == Reduce::max ? -std::numeric_limits<T>::infinity() : T{0});
  if (kind == Reduce::max) {
    for (std::size_t i = 0; i < t.numel(); ++i) out[map[i]] = std::max(out[map[i]], t[i]);
    return out;
  }
  // Accumulate in double and round once.
  std::vector<double> acc(out.numel(), 0.0);
  for (std::size_t i = 0; i < t.numel(); ++i) acc[map[i]] += static_cast<double>(t[i]);
  const double div = kind == Reduce::mean ? static_cast<double>(group) : 1.0;
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i] / div);
  return out;
}

template <class T>
std::vector<std::size_t> all_axes(const Tensor<T>& t) {
  std::vector<std::size_t> ax(t.rank());
  std::iota(ax.begin(), ax.end(), 0);
  return ax;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  T m{0};
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace qghc
