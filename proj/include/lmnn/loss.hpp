#pragma once

// Per-sample losses in output space and generalized Gauss-Newton assembly.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "lmnn/errors.hpp"
#include "lmnn/linalg.hpp"

namespace lmnn {

using linalg::Matrix;
using linalg::Vector;

enum class LossKind {
  MSE,                  // 0.5 * ||yhat - y||^2
  SoftmaxCrossEntropy,  // -log softmax(yhat)_k on logits
};

// Which curvature the LM optimizer builds for cross-entropy.
enum class CeCurvature {
  OuterProducts,  // (1/N) sum grad f_i grad f_i^T
  Exact,          // (1/N) sum J_i^T (diag(p) - p p^T) J_i
};

struct LossValueGrad {
  double value = 0.0;
  Vector grad;  // d loss / d yhat
};

inline void check_same_size(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw Error(ErrorCode::DimensionMismatch,
                "output size " + std::to_string(a.size()) + " vs target size " + std::to_string(b.size()));
}

/// Numerically stable softmax of logits.
inline Vector softmax(std::span<const double> logits) {
  const double top = *std::max_element(logits.begin(), logits.end());
  Vector p(static_cast<Eigen::Index>(logits.size()));
  double sum = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    p[static_cast<Eigen::Index>(j)] = std::exp(logits[j] - top);
    sum += p[static_cast<Eigen::Index>(j)];
  }
  return p / sum;
}

inline double log_sum_exp(std::span<const double> logits) {
  const double top = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - top);
  return top + std::log(sum);
}

/// Loss value only; may return a non-finite number instead of throwing.
inline double loss_value(LossKind kind, std::span<const double> yhat, std::span<const double> y) {
  check_same_size(yhat, y);
  if (kind == LossKind::MSE) {
    double s = 0.0;
    for (std::size_t j = 0; j < y.size(); ++j) {
      const double r = yhat[j] - y[j];
      s += r * r;
    }
    return 0.5 * s;
  }
  // -sum_j y_j log p_j = lse * sum_j y_j - sum_j y_j z_j
  const double lse = log_sum_exp(yhat);
  double value = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j)
    if (y[j] != 0.0) value += y[j] * (lse - yhat[j]);
  return value;
}

inline LossValueGrad value_and_output_grad(LossKind kind, std::span<const double> yhat, std::span<const double> y) {
  check_same_size(yhat, y);
  LossValueGrad out;
  out.grad.resize(static_cast<Eigen::Index>(y.size()));
  if (kind == LossKind::MSE) {
    for (std::size_t j = 0; j < y.size(); ++j) out.grad[static_cast<Eigen::Index>(j)] = yhat[j] - y[j];
    out.value = 0.5 * out.grad.squaredNorm();
  } else {
    for (double z : yhat)
      if (!std::isfinite(z)) throw Error(ErrorCode::NonFiniteLoss, "cross-entropy on non-finite logits");
    const Vector p = softmax(yhat);
    for (std::size_t j = 0; j < y.size(); ++j) out.grad[static_cast<Eigen::Index>(j)] = p[static_cast<Eigen::Index>(j)] - y[j];
    out.value = loss_value(kind, yhat, y);
  }
  if (!std::isfinite(out.value)) throw Error(ErrorCode::NonFiniteLoss, "loss evaluated to a non-finite value");
  return out;
}

/// out = H_i u, with H_i the loss Hessian with respect to the outputs.
inline void apply_output_hessian(LossKind kind, std::span<const double> yhat, std::span<const double> u,
                                 std::span<double> out) {
  if (kind == LossKind::MSE) {
    std::copy(u.begin(), u.end(), out.begin());
    return;
  }
  const Vector p = softmax(yhat);
  double pu = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) pu += p[static_cast<Eigen::Index>(j)] * u[j];
  for (std::size_t j = 0; j < u.size(); ++j) out[j] = p[static_cast<Eigen::Index>(j)] * (u[j] - pu);
}

inline Matrix output_hessian(LossKind kind, std::span<const double> yhat) {
  const auto c = static_cast<Eigen::Index>(yhat.size());
  if (kind == LossKind::MSE) return Matrix::Identity(c, c);
  const Vector p = softmax(yhat);
  Matrix h = -p * p.transpose();
  h.diagonal() += p;
  return h;
}

/// MSE curvature: H = (1/N) J^T J from the stacked (N*c x n) output Jacobian.
inline Matrix ggn_from_jacobian(const Matrix& jacobian, std::size_t count) {
  if (count == 0 || jacobian.rows() % static_cast<Eigen::Index>(count) != 0)
    throw Error(ErrorCode::DimensionMismatch, "Jacobian rows not a multiple of the sample count");
  Matrix h = linalg::gram(jacobian);
  h /= static_cast<double>(count);
  return h;
}

/// General GGN, (1/N) sum J_i^T H_i J_i, for either loss. `outputs` holds
/// the network outputs row by row (N x c).
///
/// For softmax cross-entropy H_i = diag(p) - p p^T = sum_j p_j (e_j - p)(e_j - p)^T,
/// so each J_i is replaced by the c rows sqrt(p_j) (e_j - p)^T J_i and the
/// result is an ordinary Gram product.
inline Matrix ggn_from_jacobian(LossKind kind, const Matrix& jacobian, const Matrix& outputs) {
  const Eigen::Index count = outputs.rows();
  const Eigen::Index c = outputs.cols();
  if (jacobian.rows() != count * c)
    throw Error(ErrorCode::DimensionMismatch, "Jacobian has " + std::to_string(jacobian.rows()) +
                                                  " rows, expected " + std::to_string(count * c));
  if (kind == LossKind::MSE) return ggn_from_jacobian(jacobian, static_cast<std::size_t>(count));

  Matrix scaled(jacobian.rows(), jacobian.cols());
  for (Eigen::Index i = 0; i < count; ++i) {
    const Vector p = softmax(std::span<const double>(outputs.row(i).data(), static_cast<std::size_t>(c)));
    const auto block = jacobian.middleRows(i * c, c);
    const Eigen::RowVectorXd pj = p.transpose() * block;  // p^T J_i
    for (Eigen::Index j = 0; j < c; ++j)
      scaled.row(i * c + j) = std::sqrt(p[j]) * (block.row(j) - pj);
  }
  return ggn_from_jacobian(scaled, static_cast<std::size_t>(count));
}

/// Cross-entropy curvature as outer products of per-sample gradients:
/// H = (1/N) sum_i g_i g_i^T, with g_i the rows of `per_sample`.
inline Matrix ggn_from_per_sample_grads(const Matrix& per_sample) {
  if (per_sample.rows() == 0) throw Error(ErrorCode::DimensionMismatch, "no per-sample gradients");
  Matrix h = linalg::gram(per_sample);
  h /= static_cast<double>(per_sample.rows());
  return h;
}

}  // namespace lmnn
