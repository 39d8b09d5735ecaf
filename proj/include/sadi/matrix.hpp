#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sadi/errors.hpp"

namespace sadi {

// Dense row-major matrix of doubles. All numeric state in the library is
// expressed as 2-D matrices; vectors are 1xN or Nx1.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), v(size_t(r) * c, fill) {
    if (r < 0 || c < 0) throw DimError("Matrix: negative dimensions");
  }

  double& operator()(int i, int j) { return v[size_t(i) * cols + j]; }
  double operator()(int i, int j) const { return v[size_t(i) * cols + j]; }

  double* row(int i) { return v.data() + size_t(i) * cols; }
  const double* row(int i) const { return v.data() + size_t(i) * cols; }

  size_t size() const { return v.size(); }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

inline void check_same_shape(const Matrix& a, const Matrix& b, const char* who) {
  if (!a.same_shape(b))
    throw DimError(std::string(who) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// c += a * b
inline void matmul_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  if (a.cols != b.rows) throw DimError("matmul: inner dimensions " + shape_str(a) + " * " + shape_str(b));
  if (c.rows != a.rows || c.cols != b.cols) throw DimError("matmul: bad accumulator shape");
  const int n = a.rows, k = a.cols, m = b.cols;
  for (int i = 0; i < n; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (int p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b.row(p);
      for (int j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

inline Matrix matmul_plain(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows, b.cols);
  matmul_acc(a, b, c);
  return c;
}

// c += a * b^T
inline void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  if (a.cols != b.cols) throw DimError("matmul_nt: inner dimensions " + shape_str(a) + " * " + shape_str(b) + "^T");
  if (c.rows != a.rows || c.cols != b.rows) throw DimError("matmul_nt: bad accumulator shape");
  const int n = a.rows, k = a.cols, m = b.rows;
  for (int i = 0; i < n; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (int j = 0; j < m; ++j) {
      const double* bj = b.row(j);
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

// c += a^T * b
inline void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  if (a.rows != b.rows) throw DimError("matmul_tn: inner dimensions " + shape_str(a) + "^T * " + shape_str(b));
  if (c.rows != a.cols || c.cols != b.cols) throw DimError("matmul_tn: bad accumulator shape");
  const int n = a.rows, k = a.cols, m = b.cols;
  for (int i = 0; i < n; ++i) {
    const double* ai = a.row(i);
    const double* bi = b.row(i);
    for (int p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      double* cp = c.row(p);
      for (int j = 0; j < m; ++j) cp[j] += aip * bi[j];
    }
  }
}

inline Matrix transpose_plain(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

}  // namespace sadi
