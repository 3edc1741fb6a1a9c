#pragma once

// Dense vectors and matrices for the curvature-based optimizers.
//
// Storage is Eigen (64-bit, row-major matrices). This header only adds the
// checked operations the optimizers rely on: the Gram product, rank-1
// accumulation, and an SPD solve that escalates diagonal jitter when the
// Cholesky factorization fails.

#include <cmath>
#include <cstddef>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "lmnn/errors.hpp"

namespace lmnn::linalg {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

inline std::string shape_str(Index r, Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.allFinite();
}

inline double inf_norm(const Vector& v) { return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff(); }

/// Copies the lower triangle onto the upper one, making `a` symmetric to the bit.
inline void symmetrize_from_lower(Matrix& a) {
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = i + 1; j < a.cols(); ++j) a(i, j) = a(j, i);
}

inline Vector matvec(const Matrix& a, const Vector& x) {
  if (a.cols() != x.size())
    throw Error(ErrorCode::DimensionMismatch,
                "matvec " + shape_str(a.rows(), a.cols()) + " by vector of length " + std::to_string(x.size()));
  return a * x;
}

/// J^T J, symmetric to the bit.
inline Matrix gram(const Matrix& j) {
  Matrix h = Matrix::Zero(j.cols(), j.cols());
  h.selfadjointView<Eigen::Lower>().rankUpdate(j.transpose());
  symmetrize_from_lower(h);
  return h;
}

/// H += w * g g^T
inline void outer_add(Matrix& h, const Vector& g, double w) {
  if (h.rows() != h.cols() || h.rows() != g.size())
    throw Error(ErrorCode::DimensionMismatch,
                "outer_add into " + shape_str(h.rows(), h.cols()) + " with vector of length " +
                    std::to_string(g.size()));
  h.noalias() += w * g * g.transpose();
}

/// Result of an SPD solve: the solution plus the diagonal jitter that was
/// actually added to make the factorization succeed (0 on the plain path).
struct SpdSolution {
  Vector x;
  double jitter = 0.0;
};

/// Cholesky factor of A + jitter*I, where jitter is the first level in
/// {0, 1e-12, 1e-11, ..., 1e-6} at which factorization succeeds.
class SpdFactor {
 public:
  explicit SpdFactor(const Matrix& a) {
    if (a.rows() != a.cols())
      throw Error(ErrorCode::DimensionMismatch, "spd factor of non-square " + shape_str(a.rows(), a.cols()));
    const double scale = a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff();
    if (!a.allFinite()) throw Error(ErrorCode::NonSPD, "matrix has non-finite entries");
    if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
      throw Error(ErrorCode::InvalidArgument, "spd factor of a non-symmetric matrix");

    if (try_factor(a, 0.0)) return;
    double jitter = 1e-12;
    for (int k = 0; k <= 6; ++k, jitter *= 10.0) {
      if (try_factor(a, jitter)) return;
    }
    throw Error(ErrorCode::NonSPD, "Cholesky failed at every jitter level up to 1e-6");
  }

  Index size() const { return llt_.rows(); }
  double jitter() const { return jitter_; }

  Vector solve(const Vector& b) const {
    if (b.size() != llt_.rows())
      throw Error(ErrorCode::DimensionMismatch,
                  "rhs of length " + std::to_string(b.size()) + " for system of size " + std::to_string(llt_.rows()));
    return llt_.solve(b);
  }

 private:
  bool try_factor(const Matrix& a, double jitter) {
    Matrix shifted = a;
    if (jitter > 0.0) shifted.diagonal().array() += jitter;
    llt_.compute(shifted);
    if (llt_.info() != Eigen::Success) return false;
    if (!llt_.matrixLLT().diagonal().allFinite()) return false;
    jitter_ = jitter;
    return true;
  }

  Eigen::LLT<Matrix, Eigen::Lower> llt_;
  double jitter_ = 0.0;
};

inline SpdSolution spd_solve_detailed(const Matrix& a, const Vector& b) {
  if (a.rows() != b.size())
    throw Error(ErrorCode::DimensionMismatch,
                "spd_solve " + shape_str(a.rows(), a.cols()) + " with rhs of length " + std::to_string(b.size()));
  SpdFactor factor(a);
  return {factor.solve(b), factor.jitter()};
}

inline Vector spd_solve(const Matrix& a, const Vector& b) { return spd_solve_detailed(a, b).x; }

}  // namespace lmnn::linalg
