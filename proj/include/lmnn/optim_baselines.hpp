#pragma once

// Comparison optimizers: SGD with momentum and weight decay, Adam,
// limited-memory BFGS at a fixed learning rate, and Hessian-free
// (conjugate gradient on matrix-free Gauss-Newton products).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <string>
#include <vector>

#include "lmnn/errors.hpp"
#include "lmnn/linalg.hpp"
#include "lmnn/loss.hpp"
#include "lmnn/net.hpp"

namespace lmnn {

struct SGDConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// v <- momentum * v + (g + wd * theta);  theta <- theta - lr * v
inline void sgd_step(Vector& theta, const Vector& g, Vector& velocity, const SGDConfig& cfg) {
  if (g.size() != theta.size() || velocity.size() != theta.size())
    throw Error(ErrorCode::DimensionMismatch, "sgd_step size mismatch");
  velocity = cfg.momentum * velocity + g + cfg.weight_decay * theta;
  theta -= cfg.lr * velocity;
}

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Vector m;
  Vector v;
  std::size_t t = 0;  // steps taken; the first update uses t = 1

  static AdamState initial(Eigen::Index n) { return {Vector::Zero(n), Vector::Zero(n), 0}; }
};

inline void adam_step(Vector& theta, const Vector& g, AdamState& s, const AdamConfig& cfg) {
  if (g.size() != theta.size() || s.m.size() != theta.size() || s.v.size() != theta.size())
    throw Error(ErrorCode::DimensionMismatch, "adam_step size mismatch");
  ++s.t;
  s.m = cfg.beta1 * s.m + (1.0 - cfg.beta1) * g;
  s.v = cfg.beta2 * s.v + (1.0 - cfg.beta2) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.t));
  theta.array() -= cfg.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + cfg.eps);
}

struct CurvaturePair {
  Vector s;  // x_{j+1} - x_j
  Vector y;  // grad_{j+1} - grad_j
};

struct LBFGSConfig {
  double lr = 0.005;
  std::size_t memory = 10;  // 0 keeps every pair
};

/// Curvature-pair history, oldest first. Pairs with s^T y <= 1e-12 are dropped.
class LBFGSHistory {
 public:
  explicit LBFGSHistory(std::size_t memory = 10) : memory_(memory) {}

  /// Returns false when the pair was skipped.
  bool push(Vector s, Vector y) {
    if (s.size() != y.size()) throw Error(ErrorCode::DimensionMismatch, "curvature pair sizes differ");
    if (!(s.dot(y) > 1e-12)) return false;
    pairs_.push_back({std::move(s), std::move(y)});
    if (memory_ > 0 && pairs_.size() > memory_) pairs_.pop_front();
    return true;
  }

  const std::deque<CurvaturePair>& pairs() const { return pairs_; }
  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }

 private:
  std::size_t memory_;
  std::deque<CurvaturePair> pairs_;
};

/// -H_k^{-1} g by the two-loop recursion, with H_0^{-1} = gamma I and
/// gamma = s^T y / y^T y of the newest pair (1 without history).
inline Vector lbfgs_direction(const Vector& g, const LBFGSHistory& history) {
  const auto& pairs = history.pairs();
  const std::size_t m = pairs.size();
  std::vector<double> alpha(m), rho(m);
  Vector q = g;
  for (std::size_t k = m; k-- > 0;) {
    const auto& p = pairs[k];
    if (p.s.size() != g.size()) throw Error(ErrorCode::DimensionMismatch, "history and gradient sizes differ");
    rho[k] = 1.0 / p.y.dot(p.s);
    alpha[k] = rho[k] * p.s.dot(q);
    q -= alpha[k] * p.y;
  }
  double gamma = 1.0;
  if (m > 0) gamma = pairs.back().s.dot(pairs.back().y) / pairs.back().y.squaredNorm();
  Vector r = gamma * q;
  for (std::size_t k = 0; k < m; ++k) {
    const auto& p = pairs[k];
    const double beta = rho[k] * p.y.dot(r);
    r += (alpha[k] - beta) * p.s;
  }
  return -r;
}

/// Fixed learning-rate L-BFGS driver. Each call forms the pair from the
/// previous call's point and gradient.
class LBFGSOptimizer {
 public:
  explicit LBFGSOptimizer(LBFGSConfig cfg = {}) : cfg_(cfg), history_(cfg.memory) {}

  /// Moves theta and returns the step taken.
  Vector step(Vector& theta, const Vector& g) {
    if (has_prev_) history_.push(theta - prev_theta_, g - prev_grad_);
    const Vector dir = lbfgs_direction(g, history_);
    prev_theta_ = theta;
    prev_grad_ = g;
    has_prev_ = true;
    const Vector taken = cfg_.lr * dir;
    theta += taken;
    return taken;
  }

  const LBFGSHistory& history() const { return history_; }

 private:
  LBFGSConfig cfg_;
  LBFGSHistory history_;
  Vector prev_theta_;
  Vector prev_grad_;
  bool has_prev_ = false;
};

struct CGResult {
  Vector x;
  std::size_t iterations = 0;
  std::vector<double> residual_norms;  // ||b - A x_k||, starting with x_0 = 0
  bool converged = false;
};

/// Linear conjugate gradient from x = 0 for A x = b, with `apply(p)` = A p.
/// Stops once ||r|| <= tol * ||b|| or after max_iters iterations.
template <typename ApplyA>
CGResult conjugate_gradient(ApplyA&& apply, const Vector& b, std::size_t max_iters, double tol) {
  CGResult out;
  out.x = Vector::Zero(b.size());
  Vector r = b;
  Vector p = r;
  double rr = r.squaredNorm();
  const double b_norm = std::sqrt(rr);
  out.residual_norms.push_back(b_norm);
  if (b_norm == 0.0) {
    out.converged = true;
    return out;
  }
  for (std::size_t k = 0; k < max_iters; ++k) {
    const Vector ap = apply(p);
    const double pap = p.dot(ap);
    if (!(pap > 0.0)) throw Error(ErrorCode::CGBreakdown, "p^T A p = " + std::to_string(pap));
    const double alpha = rr / pap;
    out.x += alpha * p;
    r -= alpha * ap;
    const double rr_next = r.squaredNorm();
    out.iterations = k + 1;
    out.residual_norms.push_back(std::sqrt(rr_next));
    if (std::sqrt(rr_next) <= tol * b_norm) {
      out.converged = true;
      break;
    }
    p = r + (rr_next / rr) * p;
    rr = rr_next;
  }
  return out;
}

struct HFConfig {
  double lr = 0.1;
  std::size_t cg_max_iters = 50;
  double cg_tol = 1e-6;
  double lambda0 = 1.0;
  double lambda_up = 10.0;
  double lambda_down = 10.0;
  double lambda_min = 1e-12;
  double lambda_max = 1e12;
};

struct HFState {
  double lambda = 1.0;
};

struct HFStepReport {
  double loss_before = 0.0;
  double loss_after = 0.0;
  double lambda_used = 0.0;
  double step_norm = 0.0;
  std::size_t cg_iterations = 0;
};

/// Solves (G + lambda I) d = -g by CG on gn_vector_product with the
/// curvature frozen at theta, then theta <- theta + lr * d. Lambda goes up
/// when the loss increased and down otherwise.
inline HFStepReport hf_step(HFState& state, Vector& theta, const Network& net, const Batch& batch, LossKind loss,
                            const HFConfig& cfg) {
  HFStepReport rep;
  rep.lambda_used = state.lambda;
  const auto lg = grad(net, theta, batch, loss);
  rep.loss_before = lg.loss;
  if (lg.grad.isZero(0.0)) {
    rep.loss_after = lg.loss;
    return rep;
  }
  const double lambda = state.lambda;
  const auto cg = conjugate_gradient(
      [&](const Vector& v) -> Vector { return gn_vector_product(net, theta, batch, loss, v) + lambda * v; },
      Vector(-lg.grad), cfg.cg_max_iters, cfg.cg_tol);
  rep.cg_iterations = cg.iterations;
  const Vector taken = cfg.lr * cg.x;
  theta += taken;
  rep.step_norm = taken.norm();
  rep.loss_after = batch_loss(net, theta, batch, loss);
  if (!std::isfinite(rep.loss_after)) throw Error(ErrorCode::NonFiniteLoss, "Hessian-free step produced a non-finite loss");
  state.lambda = rep.loss_after > rep.loss_before ? std::min(state.lambda * cfg.lambda_up, cfg.lambda_max)
                                                  : std::max(state.lambda / cfg.lambda_down, cfg.lambda_min);
  return rep;
}

}  // namespace lmnn
