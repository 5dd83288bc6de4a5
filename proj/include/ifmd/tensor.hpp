#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ifmd/errors.hpp"

namespace ifmd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array of doubles. A rank-0 tensor (empty shape) holds one value.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                           std::to_string(data_.size()) + " values");
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor diagonal(std::initializer_list<double> values) {
    const std::size_t n = values.size();
    Tensor t({n, n});
    std::size_t i = 0;
    for (double v : values) t.data_[i * n + i] = v, ++i;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size())
      throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape_));
    return shape_[axis];
  }
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> mutable_data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }

  double item() const {
    if (data_.size() != 1) throw DimensionError("item() on non-scalar " + shape_string(shape_));
    return data_[0];
  }

  bool is_matrix() const noexcept { return shape_.size() == 2; }
  bool is_square() const noexcept { return is_matrix() && shape_[0] == shape_[1]; }

  // Same data, new extents.
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void require_finite(const std::string& context) const {
    if (!all_finite()) throw NumericalError("non-finite value produced by " + context);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_matrix(const Tensor& t, const char* what) {
  if (!t.is_matrix())
    throw DimensionError(std::string(what) + " expects a matrix, got " + shape_string(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

namespace kernel {

namespace detail {

constexpr std::size_t kRowTile = 4;
constexpr std::size_t kColTile = 8;

// c (+)= op(a) * b where op(a)(i, p) = a[i*k + p], or a[p*m + i] when transposed.
// Columns of b are packed in panels of kColTile so the inner loop streams
// contiguous memory regardless of n.
template <bool TransposeA>
inline void gemm_panels(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
                        bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (m == 0 || n == 0 || k == 0) return;
  auto av = [&](std::size_t i, std::size_t p) { return TransposeA ? a[p * m + i] : a[i * k + p]; };
  std::vector<double> panel(k * kColTile);
  for (std::size_t j0 = 0; j0 < n; j0 += kColTile) {
    const std::size_t nr = std::min(kColTile, n - j0);
    for (std::size_t p = 0; p < k; ++p) {
      const double* src = b + p * n + j0;
      double* dst = panel.data() + p * kColTile;
      for (std::size_t jj = 0; jj < kColTile; ++jj) dst[jj] = jj < nr ? src[jj] : 0.0;
    }
    for (std::size_t i0 = 0; i0 < m; i0 += kRowTile) {
      const std::size_t mr = std::min(kRowTile, m - i0);
      double acc[kRowTile][kColTile] = {};
      if (mr == kRowTile) {
        for (std::size_t p = 0; p < k; ++p) {
          const double* bp = panel.data() + p * kColTile;
          double ar[kRowTile];
          for (std::size_t r = 0; r < kRowTile; ++r) ar[r] = av(i0 + r, p);
          for (std::size_t r = 0; r < kRowTile; ++r)
            for (std::size_t jj = 0; jj < kColTile; ++jj) acc[r][jj] += ar[r] * bp[jj];
        }
      } else {
        for (std::size_t p = 0; p < k; ++p) {
          const double* bp = panel.data() + p * kColTile;
          for (std::size_t r = 0; r < mr; ++r) {
            const double ar = av(i0 + r, p);
            for (std::size_t jj = 0; jj < kColTile; ++jj) acc[r][jj] += ar * bp[jj];
          }
        }
      }
      for (std::size_t r = 0; r < mr; ++r) {
        double* crow = c + (i0 + r) * n + j0;
        for (std::size_t jj = 0; jj < nr; ++jj) crow[jj] += acc[r][jj];
      }
    }
  }
}

}  // namespace detail

// c[m x n] (+)= a[m x k] * b[k x n]
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
                    bool accumulate) {
  detail::gemm_panels<false>(m, k, n, a, b, c, accumulate);
}

// c[m x n] (+)= a^T * b with a stored [k x m], b [k x n]
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
                    bool accumulate) {
  detail::gemm_panels<true>(m, k, n, a, b, c, accumulate);
}

// c[m x n] (+)= a * b^T with a [m x k], b stored [n x k]. Each entry is a dot
// product over k, accumulated in fixed lanes so the order never depends on tiling.
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c,
                    bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  constexpr std::size_t kTile = 4;
  constexpr std::size_t kLanes = 8;
  const std::size_t kv = k - k % kLanes;
  for (std::size_t i0 = 0; i0 < m; i0 += kTile) {
    const std::size_t mr = std::min(kTile, m - i0);
    for (std::size_t j0 = 0; j0 < n; j0 += kTile) {
      const std::size_t nr = std::min(kTile, n - j0);
      double acc[kTile][kTile][kLanes] = {};
      if (mr == kTile && nr == kTile) {
        for (std::size_t p = 0; p < kv; p += kLanes)
          for (std::size_t r = 0; r < kTile; ++r)
            for (std::size_t s = 0; s < kTile; ++s) {
              const double* ar = a + (i0 + r) * k + p;
              const double* bs = b + (j0 + s) * k + p;
              for (std::size_t l = 0; l < kLanes; ++l) acc[r][s][l] += ar[l] * bs[l];
            }
      } else {
        for (std::size_t p = 0; p < kv; p += kLanes)
          for (std::size_t r = 0; r < mr; ++r)
            for (std::size_t s = 0; s < nr; ++s) {
              const double* ar = a + (i0 + r) * k + p;
              const double* bs = b + (j0 + s) * k + p;
              for (std::size_t l = 0; l < kLanes; ++l) acc[r][s][l] += ar[l] * bs[l];
            }
      }
      for (std::size_t r = 0; r < mr; ++r)
        for (std::size_t s = 0; s < nr; ++s) {
          double tail = 0.0;
          for (std::size_t p = kv; p < k; ++p) tail += a[(i0 + r) * k + p] * b[(j0 + s) * k + p];
          double sum = 0.0;
          for (std::size_t l = 0; l < kLanes; ++l) sum += acc[r][s][l];
          c[(i0 + r) * n + j0 + s] += sum + tail;
        }
    }
  }
}

}  // namespace kernel

// ---- eager operations on tensors -------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (!a.is_matrix() || !b.is_matrix() || a.cols() != b.rows())
    throw DimensionError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  Tensor c({a.rows(), b.cols()});
  kernel::gemm_nn(a.rows(), a.cols(), b.cols(), a.data().data(), b.data().data(),
                  c.mutable_data().data(), false);
  return c;
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor c = a;
  auto out = c.mutable_data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor c = a;
  auto out = c.mutable_data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return c;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (double& v : c.mutable_data()) v *= s;
  return c;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor c = a;
  auto out = c.mutable_data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return c;
}

inline double trace(const Tensor& a) {
  if (!a.is_square()) throw DimensionError("trace: non-square input " + shape_string(a.shape()));
  double t = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) t += a.at(i, i);
  return t;
}

inline double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

// Per-row mean of a d x m matrix, as a d x 1 column.
inline Tensor row_mean(const Tensor& z) {
  require_matrix(z, "row_mean");
  const std::size_t d = z.rows(), m = z.cols();
  if (m == 0) throw ContractError("row_mean: empty batch");
  Tensor mu({d, 1});
  for (std::size_t i = 0; i < d; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += z[i * m + j];
    mu[i] = s / static_cast<double>(m);
  }
  return mu;
}

// Z - (1/m) Z 1 1^T for a features x samples matrix.
inline Tensor mean_center(const Tensor& z) {
  const Tensor mu = row_mean(z);
  Tensor c = z;
  const std::size_t d = z.rows(), m = z.cols();
  auto out = c.mutable_data();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] -= mu[i];
  return c;
}

inline double frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

// ||A^T A - I||_F, the orthogonality defect of a square matrix.
inline double orthogonality_error(const Tensor& c) {
  if (!c.is_square()) throw DimensionError("orthogonality_error: non-square input");
  const std::size_t d = c.rows();
  Tensor g({d, d});
  kernel::gemm_tn(d, d, d, c.data().data(), c.data().data(), g.mutable_data().data(), false);
  return frobenius_norm(sub(g, Tensor::identity(d)));
}

}  // namespace ifmd
