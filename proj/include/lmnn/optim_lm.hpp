#pragma once

// Levenberg-Marquardt for neural networks.
//
// One iteration (lm_step) does, in order:
//   1. mean loss, gradient and GGN curvature H on the batch
//   2. d <- max(d, diag H)                              (max-diagonal damping)
//   3. step from (H + lambda diag d), blended with the previous accepted
//      step by adaptive_momentum when enabled, plain damped GN otherwise
//   4. candidate theta + lr0 * step
//   5. uphill acceptance test against the reference loss
//   6. on rejection, a learning-rate grid search along the same step and a
//      second acceptance test
//   7. accept: theta moves and the step becomes the new momentum direction.
//      Lambda drops when the lr0 candidate lowered the loss and rises
//      otherwise (clamped), so line-search rescues still widen the damping.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lmnn/errors.hpp"
#include "lmnn/linalg.hpp"
#include "lmnn/loss.hpp"
#include "lmnn/net.hpp"

namespace lmnn {

enum class UphillMode { Last, MinHistory };

struct LMConfig {
  double lambda0 = 1.0;
  double lr0 = 1.0;
  double lambda_up = 10.0;
  double lambda_down = 10.0;
  double lambda_min = 1e-12;
  double lambda_max = 1e12;
  bool momentum_enabled = true;
  double delta_p = 1.0;
  bool delta_p_relative = true;  // delta_p is a multiple of the damped Newton step length sqrt(g^T A^-1 g)
  double xi = 0.9;
  double uphill_b = 0.1;  // 0 accepts only non-increasing steps
  UphillMode uphill_mode = UphillMode::Last;
  bool linesearch_enabled = true;
  std::size_t max_iters = 100;
  CeCurvature ce_curvature = CeCurvature::OuterProducts;
  std::size_t jacobian_cap_bytes = kDefaultJacobianCapBytes;

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0)) throw Error(ErrorCode::InvalidArgument, std::string(name) + " must be positive");
    };
    positive(lambda0, "lambda0");
    positive(lr0, "lr0");
    positive(lambda_min, "lambda_min");
    positive(delta_p, "deltaP");
    if (!(lambda_up > 1.0) || !(lambda_down > 1.0))
      throw Error(ErrorCode::InvalidArgument, "lambda_up and lambda_down must exceed 1");
    if (!(lambda_max >= lambda_min)) throw Error(ErrorCode::InvalidArgument, "lambda_max < lambda_min");
    if (!(xi > 0.0 && xi < 1.0)) throw Error(ErrorCode::InvalidArgument, "xi must lie in (0, 1)");
    if (!(uphill_b >= 0.0)) throw Error(ErrorCode::InvalidArgument, "uphill_b must be >= 0");
  }
};

/// Running diagonal D^T D: the elementwise maximum of every curvature
/// diagonal seen so far, starting from 0.01.
struct DampingState {
  Vector d;

  static DampingState initial(Eigen::Index n) { return {Vector::Constant(n, 0.01)}; }
};

inline void update_damping(DampingState& damping, const Vector& diag) {
  if (diag.size() != damping.d.size())
    throw Error(ErrorCode::DimensionMismatch, "damping has length " + std::to_string(damping.d.size()) +
                                                  ", curvature diagonal " + std::to_string(diag.size()));
  damping.d = damping.d.cwiseMax(diag);
}

/// H + lambda * diag(d)
inline Matrix damped_matrix(const Matrix& h, double lambda, const DampingState& damping) {
  if (h.rows() != h.cols() || h.rows() != damping.d.size())
    throw Error(ErrorCode::DimensionMismatch, "curvature and damping sizes differ");
  Matrix a = h;
  a.diagonal() += lambda * damping.d;
  return a;
}

/// Damped Gauss-Newton step -(H + lambda D^T D)^{-1} g. Updates the damping
/// diagonal from diag(H) before solving.
inline Vector lm_direction(const Matrix& h, const Vector& g, double lambda, DampingState& damping) {
  if (h.rows() != g.size()) throw Error(ErrorCode::DimensionMismatch, "curvature and gradient sizes differ");
  update_damping(damping, h.diagonal());
  if (g.isZero(0.0)) return Vector::Zero(g.size());
  return linalg::spd_solve(damped_matrix(h, lambda, damping), -g);
}

struct MomentumTerms {
  double igg = 0.0;  // g^T A^{-1} g
  double igf = 0.0;  // g^T prev
  double iff = 0.0;  // prev^T A prev
  double delta_q = 0.0;
  double z1 = 0.0;
  double z2 = 0.0;
};

/// Step that maximizes conjugacy step^T A prev subject to step^T A step = deltaP^2
/// and g^T step = deltaQ, with deltaQ = -xi * deltaP * sqrt(g^T A^{-1} g).
/// `factor` factorizes the damped matrix A, which is also passed as `a`.
/// Throws DegenerateDirections when prev is (numerically) parallel to A^{-1} g.
inline Vector adaptive_momentum(const Matrix& a, const linalg::SpdFactor& factor, const Vector& g, const Vector& prev,
                                double delta_p, double xi, MomentumTerms* terms_out = nullptr) {
  if (a.rows() != g.size() || prev.size() != g.size() || factor.size() != g.size())
    throw Error(ErrorCode::DimensionMismatch, "momentum inputs have inconsistent sizes");
  const Vector a_inv_g = factor.solve(g);
  MomentumTerms t;
  t.igg = g.dot(a_inv_g);
  t.igf = g.dot(prev);
  t.iff = prev.dot(a * prev);
  const double det = t.iff * t.igg - t.igf * t.igf;
  if (!(t.igg > 0.0) || !(t.iff > 0.0) || !(det > 1e-14 * t.iff * t.igg))
    throw Error(ErrorCode::DegenerateDirections, "previous step is parallel to the damped Newton direction");
  t.delta_q = -xi * delta_p * std::sqrt(t.igg);
  const double radicand = (t.igg * delta_p * delta_p - t.delta_q * t.delta_q) / det;
  t.z2 = 0.5 / std::sqrt(radicand);
  t.z1 = (-2.0 * t.z2 * t.delta_q + t.igf) / t.igg;
  if (terms_out) *terms_out = t;
  return (-t.z1 / (2.0 * t.z2)) * a_inv_g + (1.0 / (2.0 * t.z2)) * prev;
}

inline Vector adaptive_momentum(const Matrix& a, const Vector& g, const Vector& prev, double delta_p, double xi,
                                MomentumTerms* terms_out = nullptr) {
  const linalg::SpdFactor factor(a);
  return adaptive_momentum(a, factor, g, prev, delta_p, xi, terms_out);
}

/// Learning rates probed by the line search: 1e-6, then 0.125, 0.25, ..., 9.0.
inline const std::array<double, 73>& line_search_grid() {
  static const std::array<double, 73> grid = [] {
    std::array<double, 73> g{};
    g[0] = 1e-6;
    for (std::size_t k = 1; k <= 72; ++k) g[k] = 0.125 * static_cast<double>(k);
    return g;
  }();
  return grid;
}

struct LineSearchResult {
  double lr = 0.0;
  double loss = 0.0;
};

/// Argmin of loss_at(lr) over line_search_grid(); first index wins ties and
/// non-finite values are skipped.
template <typename LossAt>
LineSearchResult lr_line_search(LossAt&& loss_at) {
  std::optional<LineSearchResult> best;
  for (double lr : line_search_grid()) {
    const double f = loss_at(lr);
    if (!std::isfinite(f)) continue;
    if (!best || f < best->loss) best = LineSearchResult{lr, f};
  }
  if (!best) throw Error(ErrorCode::AllNonFinite, "loss is non-finite at every line-search point");
  return *best;
}

inline LineSearchResult lr_line_search(const Network& net, const Vector& theta, const Vector& step, const Batch& batch,
                                       LossKind loss) {
  if (!step.allFinite()) throw Error(ErrorCode::InvalidArgument, "line search along a non-finite step");
  Vector probe(theta.size());
  return lr_line_search([&](double lr) {
    probe = theta + lr * step;
    return batch_loss(net, probe, batch, loss);
  });
}

/// cos(a, b), defined as 0 when either vector is zero.
inline double step_cosine(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

/// Accept iff (1 - beta)^b * f_new <= f_ref with beta = max(0, cos(new, old)).
/// Obtuse turns get beta = 0, so a step that lowers the loss always passes.
inline bool uphill_accept(const Vector& step_new, const Vector& step_old, double b, double f_new, double f_ref) {
  if (!std::isfinite(f_new)) return false;
  const double beta = std::max(0.0, step_cosine(step_new, step_old));
  return std::pow(1.0 - beta, b) * f_new <= f_ref;
}

struct LMState {
  Vector theta;
  double lambda = 1.0;
  DampingState damping;
  Vector prev_step;                 // last accepted step, lr included; zero before the first accept
  std::vector<double> loss_history;  // accepted losses, starting with the initial one
  std::size_t iter = 0;

  static LMState initial(Vector theta0, const LMConfig& cfg) {
    LMState s;
    const auto n = theta0.size();
    s.theta = std::move(theta0);
    s.lambda = cfg.lambda0;
    s.damping = DampingState::initial(n);
    s.prev_step = Vector::Zero(n);
    return s;
  }
};

struct Curvature {
  double loss = 0.0;
  Vector grad;
  Matrix h;
};

/// Mean loss, gradient and GGN matrix for one batch. MSE and exact
/// cross-entropy go through the stacked output Jacobian; the outer-product
/// cross-entropy form goes through per-sample gradients.
inline Curvature assemble_curvature(const Network& net, const Vector& theta, const Batch& batch, LossKind loss,
                                    CeCurvature ce_mode = CeCurvature::OuterProducts,
                                    std::size_t cap_bytes = kDefaultJacobianCapBytes) {
  Curvature out;
  if (loss == LossKind::SoftmaxCrossEntropy && ce_mode == CeCurvature::OuterProducts) {
    auto ps = per_sample_grads(net, theta, batch, loss);
    out.loss = ps.loss;
    out.grad = std::move(ps.grad);
    out.h = ggn_from_per_sample_grads(ps.rows);
    return out;
  }
  auto lg = grad(net, theta, batch, loss);
  out.loss = lg.loss;
  out.grad = std::move(lg.grad);
  const Matrix jac = output_jacobian(net, theta, batch, cap_bytes);
  out.h = loss == LossKind::MSE ? ggn_from_jacobian(jac, batch.count)
                                : ggn_from_jacobian(loss, jac, forward(net, theta, batch));
  return out;
}

struct LMStepReport {
  double loss_before = 0.0;  // f(theta) on the batch
  double loss_after = 0.0;   // f at the accepted point, or f_before when rejected
  double candidate_loss = 0.0;
  double reference_loss = 0.0;
  double lambda_used = 0.0;
  double lr_used = 0.0;  // 0 when rejected
  double step_norm = 0.0;  // ||theta' - theta||, 0 when rejected
  bool accepted = false;
  bool decreased = false;  // the lr0 candidate lowered the loss
  bool used_momentum = false;
  bool used_line_search = false;
};

/// One LM iteration; see the header comment for the order of operations.
inline LMStepReport lm_step(LMState& state, const Network& net, const Batch& batch, LossKind loss,
                            const LMConfig& cfg) {
  LMStepReport rep;
  rep.lambda_used = state.lambda;

  const Curvature cur = assemble_curvature(net, state.theta, batch, loss, cfg.ce_curvature, cfg.jacobian_cap_bytes);
  rep.loss_before = cur.loss;
  if (state.loss_history.empty()) state.loss_history.push_back(cur.loss);

  update_damping(state.damping, cur.h.diagonal());

  Vector step = Vector::Zero(cur.grad.size());
  if (!cur.grad.isZero(0.0)) {
    const Matrix a = damped_matrix(cur.h, state.lambda, state.damping);
    const linalg::SpdFactor factor(a);
    bool have_step = false;
    if (cfg.momentum_enabled && !state.prev_step.isZero(0.0)) {
      try {
        double delta_p = cfg.delta_p;
        if (cfg.delta_p_relative) delta_p *= std::sqrt(cur.grad.dot(factor.solve(cur.grad)));
        step = adaptive_momentum(a, factor, cur.grad, state.prev_step, delta_p, cfg.xi);
        have_step = step.allFinite();
        rep.used_momentum = have_step;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::DegenerateDirections) throw;
      }
    }
    if (!have_step) step = factor.solve(-cur.grad);
  }

  // In full-batch training this equals the last accepted loss; with
  // mini-batches it is the current batch's loss at the current point.
  rep.reference_loss = cfg.uphill_mode == UphillMode::Last
                           ? cur.loss
                           : std::min(cur.loss, *std::min_element(state.loss_history.begin(), state.loss_history.end()));

  Vector candidate = state.theta + cfg.lr0 * step;
  double lr = cfg.lr0;
  double f_new = batch_loss(net, candidate, batch, loss);
  rep.candidate_loss = f_new;
  bool accepted = uphill_accept(step, state.prev_step, cfg.uphill_b, f_new, rep.reference_loss);

  if (!accepted && cfg.linesearch_enabled && step.allFinite()) {
    rep.used_line_search = true;
    try {
      const auto ls = lr_line_search(net, state.theta, step, batch, loss);
      if (uphill_accept(step, state.prev_step, cfg.uphill_b, ls.loss, rep.reference_loss)) {
        accepted = true;
        lr = ls.lr;
        f_new = ls.loss;
        candidate = state.theta + lr * step;
      }
    } catch (const Error& e) {
      if (e.code() != ErrorCode::AllNonFinite) throw;
    }
  }

  if (accepted) {
    const Vector taken = lr * step;
    state.theta = std::move(candidate);
    state.prev_step = taken;
    state.loss_history.push_back(f_new);

    rep.accepted = true;
    rep.lr_used = lr;
    rep.step_norm = taken.norm();
    rep.loss_after = f_new;
  } else {
    rep.loss_after = cur.loss;
  }
  // Lambda follows whether the full lr0 step lowered the loss. Steps taken
  // only through the line search or the uphill rule still count as failures.
  rep.decreased = rep.candidate_loss < rep.loss_before;
  state.lambda = rep.decreased ? std::max(state.lambda / cfg.lambda_down, cfg.lambda_min)
                               : std::min(state.lambda * cfg.lambda_up, cfg.lambda_max);
  ++state.iter;
  return rep;
}

}  // namespace lmnn
