#pragma once

// Self-checks behind `lmnn check`: finite-difference gradients, dense
// versus matrix-free curvature, and the momentum step's two constraints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "lmnn/linalg.hpp"
#include "lmnn/loss.hpp"
#include "lmnn/net.hpp"
#include "lmnn/optim_baselines.hpp"
#include "lmnn/optim_lm.hpp"
#include "lmnn/rng.hpp"

namespace lmnn {

struct CheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t probes = 0;

  bool passed() const { return max_error <= tolerance; }
};

inline bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed(); });
}

namespace detail {

inline Vector random_unit(Rng& rng, Eigen::Index n) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal();
  return v / v.norm();
}

inline Batch random_batch(Rng& rng, std::size_t count, std::size_t inputs, std::size_t outputs, bool one_hot) {
  Batch b{count, inputs, outputs, std::vector<double>(count * inputs), std::vector<double>(count * outputs, 0.0)};
  for (double& x : b.inputs) x = rng.uniform(-1.0, 1.0);
  for (std::size_t i = 0; i < count; ++i) {
    if (one_hot)
      b.targets[i * outputs + rng.below(outputs)] = 1.0;
    else
      for (std::size_t j = 0; j < outputs; ++j) b.targets[i * outputs + j] = rng.uniform(-1.0, 1.0);
  }
  return b;
}

// Central differences along random unit directions. Directions whose
// +-h probes change the kink signature are redrawn.
inline CheckResult gradient_probe(const std::string& name, const Network& net, const Batch& batch, LossKind loss,
                                  std::uint64_t seed, std::size_t probes) {
  constexpr double h = 1e-5;
  constexpr double floor = 1e-7;
  Rng rng(seed);
  const Vector theta = init_params(net, seed);
  const Vector g = grad(net, theta, batch, loss).grad;
  const auto base_sig = kink_signature(net, theta, batch);
  CheckResult res{name, 0.0, 1e-4, 0};
  std::size_t draws = 0;
  while (res.probes < probes && draws < 50 * probes) {
    ++draws;
    const Vector u = random_unit(rng, theta.size());
    const Vector plus = theta + h * u;
    const Vector minus = theta - h * u;
    if (kink_signature(net, plus, batch) != base_sig || kink_signature(net, minus, batch) != base_sig) continue;
    const double fd = (batch_loss(net, plus, batch, loss) - batch_loss(net, minus, batch, loss)) / (2.0 * h);
    const double an = g.dot(u);
    res.max_error = std::max(res.max_error, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), floor}));
    ++res.probes;
  }
  if (res.probes < probes) res.max_error = std::numeric_limits<double>::infinity();
  return res;
}

inline double rel_diff(const Vector& a, const Vector& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale == 0.0 ? 0.0 : (a - b).norm() / scale;
}

}  // namespace detail

/// Analytic gradients against central differences (h = 1e-5) for the ELU
/// MLP and the reference CNN under both losses.
inline std::vector<CheckResult> check_gradients(std::uint64_t seed = 7, std::size_t probes = 100) {
  Rng rng(seed);
  std::vector<CheckResult> out;
  const Network mlp = make_mlp(1, 32, 1);
  const Network mlp_ce = make_mlp(4, 32, 3);
  const Network cnn = make_mnist_cnn();
  const Batch sine = detail::random_batch(rng, 64, 1, 1, false);
  const Batch cls = detail::random_batch(rng, 32, 4, 3, true);
  Batch images = detail::random_batch(rng, 4, 28 * 28, 10, true);
  for (double& x : images.inputs) x = 0.5 * (x + 1.0);
  out.push_back(detail::gradient_probe("grad mlp mse", mlp, sine, LossKind::MSE, seed, probes));
  out.push_back(detail::gradient_probe("grad mlp cross-entropy", mlp_ce, cls, LossKind::SoftmaxCrossEntropy, seed + 1, probes));
  out.push_back(detail::gradient_probe("grad cnn mse", cnn, images, LossKind::MSE, seed + 2, probes));
  out.push_back(detail::gradient_probe("grad cnn cross-entropy", cnn, images, LossKind::SoftmaxCrossEntropy, seed + 3, probes));
  return out;
}

/// Dense GGN matrices: matrix-free products agree with them (MSE) and every
/// curvature form is positive semidefinite.
inline std::vector<CheckResult> check_ggn(std::uint64_t seed = 11, std::size_t probes = 20) {
  Rng rng(seed);
  std::vector<CheckResult> out;
  const Network net = make_mlp(2, 48, 1);  // 193 parameters
  const Batch batch = detail::random_batch(rng, 64, 2, 1, false);
  const Vector theta = init_params(net, seed);
  const Matrix h = ggn_from_jacobian(output_jacobian(net, theta, batch), batch.count);

  CheckResult prod{"ggn dense vs matrix-free (mse)", 0.0, 1e-8, 0};
  for (std::size_t k = 0; k < probes; ++k) {
    const Vector v = detail::random_unit(rng, theta.size());
    prod.max_error = std::max(prod.max_error, detail::rel_diff(h * v, gn_vector_product(net, theta, batch, LossKind::MSE, v)));
    ++prod.probes;
  }
  out.push_back(prod);

  const Network cls_net = make_mlp(4, 24, 3);
  const Batch cls = detail::random_batch(rng, 48, 4, 3, true);
  const Vector cls_theta = init_params(cls_net, seed + 1);
  const Matrix jac = output_jacobian(cls_net, cls_theta, cls);
  const Matrix outputs = forward(cls_net, cls_theta, cls);
  const std::vector<std::pair<std::string, Matrix>> forms = {
      {"mse", h},
      {"cross-entropy exact", ggn_from_jacobian(LossKind::SoftmaxCrossEntropy, jac, outputs)},
      {"cross-entropy outer products",
       ggn_from_per_sample_grads(per_sample_grads(cls_net, cls_theta, cls, LossKind::SoftmaxCrossEntropy).rows)}};
  for (const auto& [name, m] : forms) {
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(Eigen::MatrixXd(m), Eigen::EigenvaluesOnly);
    const double trace = m.trace();
    // Error is how far the smallest eigenvalue dips below zero, in units of the trace.
    out.push_back({"ggn psd (" + name + ")", std::max(0.0, -eig.eigenvalues().minCoeff() / trace), 1e-10, 1});
  }
  return out;
}

/// Matrix-free curvature products: exact cross-entropy GGN products match
/// the dense matrix, products are symmetric, and the Hessian-free CG solve
/// matches a dense Cholesky solve of the damped system.
inline std::vector<CheckResult> check_hvp(std::uint64_t seed = 13, std::size_t probes = 20) {
  Rng rng(seed);
  std::vector<CheckResult> out;
  const Network net = make_mlp(4, 24, 3);
  const Batch batch = detail::random_batch(rng, 48, 4, 3, true);
  const Vector theta = init_params(net, seed);
  const LossKind ce = LossKind::SoftmaxCrossEntropy;
  const Matrix h = ggn_from_jacobian(ce, output_jacobian(net, theta, batch), forward(net, theta, batch));

  CheckResult prod{"gnvp vs dense (cross-entropy)", 0.0, 1e-8, 0};
  CheckResult sym{"gnvp symmetry", 0.0, 1e-10, 0};
  for (std::size_t k = 0; k < probes; ++k) {
    const Vector u = detail::random_unit(rng, theta.size());
    const Vector v = detail::random_unit(rng, theta.size());
    const Vector gv = gn_vector_product(net, theta, batch, ce, v);
    const Vector gu = gn_vector_product(net, theta, batch, ce, u);
    prod.max_error = std::max(prod.max_error, detail::rel_diff(h * v, gv));
    sym.max_error = std::max(sym.max_error, std::abs(u.dot(gv) - v.dot(gu)) / std::max(gu.norm(), gv.norm()));
    ++prod.probes;
    ++sym.probes;
  }
  out.push_back(prod);
  out.push_back(sym);

  const Network mlp = make_mlp(2, 48, 1);
  const Batch reg = detail::random_batch(rng, 64, 2, 1, false);
  const Vector th = init_params(mlp, seed + 1);
  const double lambda = 0.1;
  const Vector g = grad(mlp, th, reg, LossKind::MSE).grad;
  Matrix a = ggn_from_jacobian(output_jacobian(mlp, th, reg), reg.count);
  a.diagonal().array() += lambda;
  const Vector dense = linalg::spd_solve(a, -g);
  const auto cg = conjugate_gradient(
      [&](const Vector& v) -> Vector { return gn_vector_product(mlp, th, reg, LossKind::MSE, v) + lambda * v; },
      Vector(-g), 10 * static_cast<std::size_t>(th.size()), 1e-12);
  out.push_back({"cg solve vs dense solve", detail::rel_diff(cg.x, dense), 1e-6, 1});
  return out;
}

/// Adaptive momentum on random SPD problems: the step satisfies
/// step^T A step = deltaP^2 and g^T step = deltaQ. Also the 2-d hand example.
inline std::vector<CheckResult> check_momentum(std::uint64_t seed = 17, std::size_t instances = 1000) {
  Rng rng(seed);
  CheckResult norm{"momentum step^T A step = deltaP^2", 0.0, 1e-8, 0};
  CheckResult descent{"momentum g^T step = deltaQ", 0.0, 1e-8, 0};
  while (norm.probes < instances) {
    const auto n = static_cast<Eigen::Index>(2 + rng.below(11));
    Matrix m(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) m(i, j) = rng.normal();
    Matrix a = m.transpose() * m;
    a.diagonal().array() += 0.1;
    Vector g(n), prev(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      g[i] = rng.normal();
      prev[i] = rng.normal();
    }
    const double delta_p = rng.uniform(0.1, 2.0);
    const double xi = rng.uniform(0.1, 0.95);
    MomentumTerms t;
    Vector step;
    try {
      step = adaptive_momentum(a, g, prev, delta_p, xi, &t);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DegenerateDirections) throw;
      continue;
    }
    norm.max_error = std::max(norm.max_error, std::abs(step.dot(a * step) - delta_p * delta_p) / (delta_p * delta_p));
    descent.max_error = std::max(descent.max_error, std::abs(g.dot(step) - t.delta_q) / std::abs(t.delta_q));
    ++norm.probes;
    ++descent.probes;
  }

  const Vector step = adaptive_momentum(Matrix::Identity(2, 2), Vector::Unit(2, 0), Vector::Unit(2, 1), 1.0, 0.5);
  Vector expected(2);
  expected << -0.5, 0.866025;
  const CheckResult example{"momentum 2-d example", (step - expected).cwiseAbs().maxCoeff(), 1e-6, 1};
  return {norm, descent, example};
}

}  // namespace lmnn
