#pragma once

// Feed-forward networks over a flat parameter vector.
//
// A Network is pure shape metadata: every operation takes the parameters
// theta explicitly. Evaluation runs one sample at a time through a tape
// that keeps each layer's input and pre-activation, which is all the
// reverse pass (gradients, Jacobian rows) and the forward tangent pass
// (curvature-vector products) need.
//
// Parameter layout per layer, concatenated in layer order:
//   Dense(in, out):        W[out][in], then b[out]
//   Conv2d(ci, co, k, s):  W[co][ci][k][k], then b[co]

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "lmnn/errors.hpp"
#include "lmnn/linalg.hpp"
#include "lmnn/loss.hpp"
#include "lmnn/rng.hpp"

namespace lmnn {

enum class ActivationKind { Identity, ELU, LeakyReLU };

struct Activation {
  ActivationKind kind = ActivationKind::Identity;
  double param = 0.0;  // ELU alpha or leaky slope

  static constexpr Activation identity() { return {ActivationKind::Identity, 0.0}; }
  static constexpr Activation elu(double alpha = 1.0) { return {ActivationKind::ELU, alpha}; }
  static constexpr Activation leaky_relu(double slope = 0.1) { return {ActivationKind::LeakyReLU, slope}; }

  double apply(double z) const {
    switch (kind) {
      case ActivationKind::ELU: return z >= 0.0 ? z : param * std::expm1(z);
      case ActivationKind::LeakyReLU: return z >= 0.0 ? z : param * z;
      case ActivationKind::Identity: break;
    }
    return z;
  }

  double derivative(double z) const {
    switch (kind) {
      case ActivationKind::ELU: return z >= 0.0 ? 1.0 : param * std::exp(z);
      case ActivationKind::LeakyReLU: return z >= 0.0 ? 1.0 : param;
      case ActivationKind::Identity: break;
    }
    return 1.0;
  }

  void validate() const {
    if (kind == ActivationKind::ELU && !(param > 0.0))
      throw Error(ErrorCode::InvalidArgument, "ELU alpha must be positive");
    if (kind == ActivationKind::LeakyReLU && !(param > 0.0 && param < 1.0))
      throw Error(ErrorCode::InvalidArgument, "leaky ReLU slope must lie in (0, 1)");
  }
};

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation act{};
};

struct Conv2d {
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  Activation act{};
};

struct MaxPool2d {
  std::size_t window = 2;
};

struct Flatten {};

using LayerSpec = std::variant<Dense, Conv2d, MaxPool2d, Flatten>;

struct Shape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  constexpr std::size_t size() const { return channels * height * width; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;
};

/// N samples stored row by row.
struct Batch {
  std::size_t count = 0;
  std::size_t input_size = 0;
  std::size_t target_size = 0;
  std::vector<double> inputs;   // count x input_size
  std::vector<double> targets;  // count x target_size

  std::span<const double> input(std::size_t i) const { return {inputs.data() + i * input_size, input_size}; }
  std::span<const double> target(std::size_t i) const { return {targets.data() + i * target_size, target_size}; }
};

class Network {
 public:
  struct Layer {
    LayerSpec spec;
    Shape in;
    Shape out;
    std::size_t offset = 0;   // first parameter index
    std::size_t weights = 0;  // weight count (biases follow)
    std::size_t params = 0;   // weights + biases
    std::size_t fan_in = 0;
  };

  Network(Shape input, const std::vector<LayerSpec>& specs) : input_(input) {
    if (input.size() == 0) throw Error(ErrorCode::ShapeMismatch, "empty input shape");
    if (specs.empty()) throw Error(ErrorCode::ShapeMismatch, "network has no layers");
    Shape cur = input;
    std::size_t offset = 0;
    for (const auto& spec : specs) {
      Layer layer{spec, cur, cur, offset, 0, 0, 0};
      std::visit([&](const auto& s) { describe(s, layer); }, spec);
      offset += layer.params;
      cur = layer.out;
      layers_.push_back(layer);
    }
    param_count_ = offset;
  }

  std::size_t param_count() const { return param_count_; }
  std::size_t input_size() const { return input_.size(); }
  std::size_t output_size() const { return layers_.back().out.size(); }
  Shape input_shape() const { return input_; }
  const std::vector<Layer>& layers() const { return layers_; }

 private:
  static void describe(const Dense& d, Layer& layer) {
    if (d.in == 0 || d.out == 0) throw Error(ErrorCode::ShapeMismatch, "Dense with zero size");
    if (layer.in.size() != d.in)
      throw Error(ErrorCode::ShapeMismatch, "Dense expects " + std::to_string(d.in) + " inputs, previous layer gives " +
                                                std::to_string(layer.in.size()));
    d.act.validate();
    layer.out = Shape{d.out, 1, 1};
    layer.weights = d.in * d.out;
    layer.params = layer.weights + d.out;
    layer.fan_in = d.in;
  }

  static void describe(const Conv2d& c, Layer& layer) {
    if (c.in_ch == 0 || c.out_ch == 0 || c.kernel == 0 || c.stride == 0)
      throw Error(ErrorCode::ShapeMismatch, "Conv2d with zero size");
    if (layer.in.channels != c.in_ch)
      throw Error(ErrorCode::ShapeMismatch, "Conv2d expects " + std::to_string(c.in_ch) + " channels, got " +
                                                std::to_string(layer.in.channels));
    if (layer.in.height < c.kernel || layer.in.width < c.kernel)
      throw Error(ErrorCode::ShapeMismatch, "Conv2d kernel larger than its input");
    c.act.validate();
    layer.out = Shape{c.out_ch, (layer.in.height - c.kernel) / c.stride + 1, (layer.in.width - c.kernel) / c.stride + 1};
    layer.weights = c.out_ch * c.in_ch * c.kernel * c.kernel;
    layer.params = layer.weights + c.out_ch;
    layer.fan_in = c.in_ch * c.kernel * c.kernel;
  }

  static void describe(const MaxPool2d& p, Layer& layer) {
    if (p.window == 0) throw Error(ErrorCode::ShapeMismatch, "MaxPool2d with zero window");
    if (layer.in.height < p.window || layer.in.width < p.window)
      throw Error(ErrorCode::ShapeMismatch, "MaxPool2d window larger than its input");
    layer.out = Shape{layer.in.channels, layer.in.height / p.window, layer.in.width / p.window};
  }

  static void describe(const Flatten&, Layer& layer) { layer.out = Shape{layer.in.size(), 1, 1}; }

  Shape input_;
  std::vector<Layer> layers_;
  std::size_t param_count_ = 0;
};

/// Uniform(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights in storage order, zero biases.
inline Vector init_params(const Network& net, std::uint64_t seed) {
  Rng rng(seed);
  Vector theta = Vector::Zero(static_cast<Eigen::Index>(net.param_count()));
  for (const auto& layer : net.layers()) {
    if (layer.weights == 0) continue;
    const double bound = std::sqrt(6.0 / static_cast<double>(layer.fan_in));
    for (std::size_t k = 0; k < layer.weights; ++k)
      theta[static_cast<Eigen::Index>(layer.offset + k)] = rng.uniform(-bound, bound);
  }
  return theta;
}

namespace detail {

// Activations recorded during one sample's forward pass.
struct Tape {
  std::vector<std::vector<double>> values;  // values[l] is layer l's input; values.back() the output
  std::vector<std::vector<double>> pre;     // pre-activations (Dense/Conv2d only)
  std::vector<std::vector<std::size_t>> argmax;  // MaxPool2d source indices

  std::span<const double> output() const { return values.back(); }
};

class Evaluator {
 public:
  Evaluator(const Network& net, std::span<const double> theta) : net_(net), theta_(theta) {
    if (theta.size() != net.param_count())
      throw Error(ErrorCode::ShapeMismatch, "parameter vector has length " + std::to_string(theta.size()) +
                                                ", network expects " + std::to_string(net.param_count()));
    const auto& layers = net.layers();
    tape_.values.resize(layers.size() + 1);
    tape_.pre.resize(layers.size());
    tape_.argmax.resize(layers.size());
    tape_.values[0].resize(net.input_size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      tape_.values[l + 1].resize(layers[l].out.size());
      if (std::holds_alternative<Dense>(layers[l].spec) || std::holds_alternative<Conv2d>(layers[l].spec))
        tape_.pre[l].resize(layers[l].out.size());
      if (std::holds_alternative<MaxPool2d>(layers[l].spec)) tape_.argmax[l].resize(layers[l].out.size());
    }
  }

  const Tape& tape() const { return tape_; }

  std::span<const double> forward(std::span<const double> x) {
    if (x.size() != net_.input_size())
      throw Error(ErrorCode::ShapeMismatch, "sample has " + std::to_string(x.size()) + " inputs, network expects " +
                                                std::to_string(net_.input_size()));
    std::copy(x.begin(), x.end(), tape_.values[0].begin());
    const auto& layers = net_.layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::visit([&](const auto& spec) { forward_layer(spec, l); }, layers[l].spec);
    }
    return tape_.output();
  }

  /// Reverse pass from an output cotangent. Adds scale * (d out / d theta)^T cotangent
  /// into `grad` (length n). Requires a preceding forward().
  void backward(std::span<const double> cotangent, std::span<double> grad, double scale = 1.0) {
    const auto& layers = net_.layers();
    std::vector<double> upstream(cotangent.begin(), cotangent.end());
    for (double& u : upstream) u *= scale;
    for (std::size_t l = layers.size(); l-- > 0;) {
      std::vector<double> downstream(l > 0 ? layers[l].in.size() : 0);
      std::visit([&](const auto& spec) { backward_layer(spec, l, upstream, downstream, grad); }, layers[l].spec);
      upstream.swap(downstream);
    }
  }

  /// Forward tangent pass: the directional derivative of the output along
  /// parameter direction v (inputs held fixed), i.e. J v. Requires forward().
  std::vector<double> tangent(std::span<const double> v) {
    const auto& layers = net_.layers();
    std::vector<double> dx(net_.input_size(), 0.0);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      std::vector<double> dy(layers[l].out.size(), 0.0);
      std::visit([&](const auto& spec) { tangent_layer(spec, l, v, dx, dy); }, layers[l].spec);
      dx.swap(dy);
    }
    return dx;
  }

 private:
  double w(std::size_t i) const { return theta_[i]; }

  // ---- forward ----

  void forward_layer(const Dense& d, std::size_t l) {
    const auto& layer = net_.layers()[l];
    const auto& x = tape_.values[l];
    auto& z = tape_.pre[l];
    auto& y = tape_.values[l + 1];
    const double* W = theta_.data() + layer.offset;
    const double* b = W + layer.weights;
    for (std::size_t o = 0; o < d.out; ++o) {
      double s = b[o];
      const double* row = W + o * d.in;
      for (std::size_t i = 0; i < d.in; ++i) s += row[i] * x[i];
      z[o] = s;
      y[o] = d.act.apply(s);
    }
  }

  void forward_layer(const Conv2d& c, std::size_t l) {
    const auto& layer = net_.layers()[l];
    conv_apply(c, layer, theta_.data() + layer.offset, tape_.values[l].data(), tape_.pre[l].data(), true);
    for (std::size_t k = 0; k < layer.out.size(); ++k) tape_.values[l + 1][k] = c.act.apply(tape_.pre[l][k]);
  }

  void forward_layer(const MaxPool2d& p, std::size_t l) {
    const auto& layer = net_.layers()[l];
    const auto& x = tape_.values[l];
    auto& y = tape_.values[l + 1];
    auto& arg = tape_.argmax[l];
    const Shape in = layer.in;
    const Shape out = layer.out;
    for (std::size_t ch = 0; ch < out.channels; ++ch)
      for (std::size_t oy = 0; oy < out.height; ++oy)
        for (std::size_t ox = 0; ox < out.width; ++ox) {
          std::size_t best = (ch * in.height + oy * p.window) * in.width + ox * p.window;
          for (std::size_t ky = 0; ky < p.window; ++ky)
            for (std::size_t kx = 0; kx < p.window; ++kx) {
              const std::size_t idx = (ch * in.height + oy * p.window + ky) * in.width + ox * p.window + kx;
              if (x[idx] > x[best]) best = idx;
            }
          const std::size_t o = (ch * out.height + oy) * out.width + ox;
          arg[o] = best;
          y[o] = x[best];
        }
  }

  void forward_layer(const Flatten&, std::size_t l) { tape_.values[l + 1] = tape_.values[l]; }

  // out = conv(W, x) (+ b when with_bias), valid padding.
  static void conv_apply(const Conv2d& c, const Network::Layer& layer, const double* W, const double* x, double* out,
                         bool with_bias) {
    const Shape in = layer.in;
    const Shape os = layer.out;
    const std::size_t k = c.kernel;
    const double* b = W + layer.weights;
    for (std::size_t oc = 0; oc < c.out_ch; ++oc) {
      double* plane = out + oc * os.height * os.width;
      std::fill(plane, plane + os.height * os.width, with_bias ? b[oc] : 0.0);
      for (std::size_t ic = 0; ic < c.in_ch; ++ic) {
        const double* kern = W + (oc * c.in_ch + ic) * k * k;
        const double* src = x + ic * in.height * in.width;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double wv = kern[ky * k + kx];
            for (std::size_t oy = 0; oy < os.height; ++oy) {
              const double* srow = src + (oy * c.stride + ky) * in.width + kx;
              double* orow = plane + oy * os.width;
              for (std::size_t ox = 0; ox < os.width; ++ox) orow[ox] += wv * srow[ox * c.stride];
            }
          }
      }
    }
  }

  // ---- reverse ----

  void backward_layer(const Dense& d, std::size_t l, const std::vector<double>& dy, std::vector<double>& dx,
                      std::span<double> grad) {
    const auto& layer = net_.layers()[l];
    const auto& x = tape_.values[l];
    const auto& z = tape_.pre[l];
    const double* W = theta_.data() + layer.offset;
    double* gW = grad.data() + layer.offset;
    double* gb = gW + layer.weights;
    for (std::size_t o = 0; o < d.out; ++o) {
      const double dz = dy[o] * d.act.derivative(z[o]);
      if (dz == 0.0) continue;
      gb[o] += dz;
      double* grow = gW + o * d.in;
      for (std::size_t i = 0; i < d.in; ++i) grow[i] += dz * x[i];
      if (!dx.empty()) {
        const double* row = W + o * d.in;
        for (std::size_t i = 0; i < d.in; ++i) dx[i] += row[i] * dz;
      }
    }
  }

  void backward_layer(const Conv2d& c, std::size_t l, const std::vector<double>& dy, std::vector<double>& dx,
                      std::span<double> grad) {
    const auto& layer = net_.layers()[l];
    const Shape in = layer.in;
    const Shape os = layer.out;
    const std::size_t k = c.kernel;
    const auto& x = tape_.values[l];
    const auto& z = tape_.pre[l];
    std::vector<double> dz(os.size());
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] = dy[i] * c.act.derivative(z[i]);
    const double* W = theta_.data() + layer.offset;
    double* gW = grad.data() + layer.offset;
    double* gb = gW + layer.weights;
    for (std::size_t oc = 0; oc < c.out_ch; ++oc) {
      const double* plane = dz.data() + oc * os.height * os.width;
      double bsum = 0.0;
      for (std::size_t p = 0; p < os.height * os.width; ++p) bsum += plane[p];
      gb[oc] += bsum;
      for (std::size_t ic = 0; ic < c.in_ch; ++ic) {
        const double* kern = W + (oc * c.in_ch + ic) * k * k;
        double* gkern = gW + (oc * c.in_ch + ic) * k * k;
        const double* src = x.data() + ic * in.height * in.width;
        double* dsrc = dx.empty() ? nullptr : dx.data() + ic * in.height * in.width;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double wv = kern[ky * k + kx];
            double acc = 0.0;
            for (std::size_t oy = 0; oy < os.height; ++oy) {
              const std::size_t srow = (oy * c.stride + ky) * in.width + kx;
              const double* drow = plane + oy * os.width;
              for (std::size_t ox = 0; ox < os.width; ++ox) {
                acc += drow[ox] * src[srow + ox * c.stride];
                if (dsrc) dsrc[srow + ox * c.stride] += wv * drow[ox];
              }
            }
            gkern[ky * k + kx] += acc;
          }
      }
    }
  }

  void backward_layer(const MaxPool2d&, std::size_t l, const std::vector<double>& dy, std::vector<double>& dx,
                      std::span<double>) {
    if (dx.empty()) return;
    const auto& arg = tape_.argmax[l];
    for (std::size_t o = 0; o < dy.size(); ++o) dx[arg[o]] += dy[o];
  }

  void backward_layer(const Flatten&, std::size_t, const std::vector<double>& dy, std::vector<double>& dx,
                      std::span<double>) {
    if (!dx.empty()) dx = dy;
  }

  // ---- forward tangent ----

  void tangent_layer(const Dense& d, std::size_t l, std::span<const double> v, const std::vector<double>& dx,
                     std::vector<double>& dy) {
    const auto& layer = net_.layers()[l];
    const auto& x = tape_.values[l];
    const auto& z = tape_.pre[l];
    const double* W = theta_.data() + layer.offset;
    const double* vW = v.data() + layer.offset;
    const double* vb = vW + layer.weights;
    for (std::size_t o = 0; o < d.out; ++o) {
      double s = vb[o];
      const double* row = W + o * d.in;
      const double* vrow = vW + o * d.in;
      for (std::size_t i = 0; i < d.in; ++i) s += vrow[i] * x[i] + row[i] * dx[i];
      dy[o] = d.act.derivative(z[o]) * s;
    }
  }

  void tangent_layer(const Conv2d& c, std::size_t l, std::span<const double> v, const std::vector<double>& dx,
                     std::vector<double>& dy) {
    const auto& layer = net_.layers()[l];
    std::vector<double> tmp(layer.out.size());
    // d(conv(W, x) + b) = conv(vW, x) + vb + conv(W, dx)
    conv_apply(c, layer, v.data() + layer.offset, tape_.values[l].data(), dy.data(), true);
    if (l > 0) {
      conv_apply(c, layer, theta_.data() + layer.offset, dx.data(), tmp.data(), false);
      for (std::size_t i = 0; i < dy.size(); ++i) dy[i] += tmp[i];
    }
    const auto& z = tape_.pre[l];
    for (std::size_t i = 0; i < dy.size(); ++i) dy[i] *= c.act.derivative(z[i]);
  }

  void tangent_layer(const MaxPool2d&, std::size_t l, std::span<const double>, const std::vector<double>& dx,
                     std::vector<double>& dy) {
    const auto& arg = tape_.argmax[l];
    for (std::size_t o = 0; o < dy.size(); ++o) dy[o] = dx[arg[o]];
  }

  void tangent_layer(const Flatten&, std::size_t, std::span<const double>, const std::vector<double>& dx,
                     std::vector<double>& dy) {
    dy = dx;
  }

  const Network& net_;
  std::span<const double> theta_;
  Tape tape_;
};

inline std::span<const double> as_span(const Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
inline std::span<double> as_span(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

inline void check_batch(const Network& net, const Batch& batch) {
  if (batch.count == 0) throw Error(ErrorCode::ShapeMismatch, "empty batch");
  if (batch.input_size != net.input_size())
    throw Error(ErrorCode::ShapeMismatch, "batch inputs have size " + std::to_string(batch.input_size) +
                                              ", network expects " + std::to_string(net.input_size()));
}

inline void check_targets(const Network& net, const Batch& batch) {
  if (batch.target_size != net.output_size())
    throw Error(ErrorCode::ShapeMismatch, "batch targets have size " + std::to_string(batch.target_size) +
                                              ", network outputs " + std::to_string(net.output_size()));
}

}  // namespace detail

/// Network outputs, one row per sample (N x c).
inline Matrix forward(const Network& net, const Vector& theta, const Batch& batch) {
  detail::check_batch(net, batch);
  detail::Evaluator eval(net, detail::as_span(theta));
  const auto c = static_cast<Eigen::Index>(net.output_size());
  Matrix out(static_cast<Eigen::Index>(batch.count), c);
  for (std::size_t i = 0; i < batch.count; ++i) {
    const auto y = eval.forward(batch.input(i));
    for (Eigen::Index j = 0; j < c; ++j) out(static_cast<Eigen::Index>(i), j) = y[static_cast<std::size_t>(j)];
  }
  return out;
}

struct LossGrad {
  double loss = 0.0;
  Vector grad;
};

/// Mean loss f = (1/N) sum eps_i and its gradient by reverse mode.
inline LossGrad grad(const Network& net, const Vector& theta, const Batch& batch, LossKind loss) {
  detail::check_batch(net, batch);
  detail::check_targets(net, batch);
  detail::Evaluator eval(net, detail::as_span(theta));
  LossGrad out{0.0, Vector::Zero(theta.size())};
  const double inv_n = 1.0 / static_cast<double>(batch.count);
  for (std::size_t i = 0; i < batch.count; ++i) {
    const auto y = eval.forward(batch.input(i));
    const auto vg = value_and_output_grad(loss, y, batch.target(i));
    out.loss += vg.value;
    eval.backward(detail::as_span(vg.grad), detail::as_span(out.grad), inv_n);
  }
  out.loss *= inv_n;
  if (!std::isfinite(out.loss)) throw Error(ErrorCode::NonFiniteLoss, "mean loss is not finite");
  return out;
}

struct PerSampleGrads {
  double loss = 0.0;  // mean loss over the batch
  Vector grad;        // mean gradient
  Matrix rows;        // N x n, row i = grad of eps_i
};

/// Gradients of each sample's loss, plus their mean.
inline PerSampleGrads per_sample_grads(const Network& net, const Vector& theta, const Batch& batch, LossKind loss) {
  detail::check_batch(net, batch);
  detail::check_targets(net, batch);
  detail::Evaluator eval(net, detail::as_span(theta));
  const auto n = static_cast<std::size_t>(theta.size());
  PerSampleGrads out{0.0, Vector::Zero(theta.size()), Matrix::Zero(static_cast<Eigen::Index>(batch.count), theta.size())};
  for (std::size_t i = 0; i < batch.count; ++i) {
    const auto y = eval.forward(batch.input(i));
    const auto vg = value_and_output_grad(loss, y, batch.target(i));
    out.loss += vg.value;
    eval.backward(detail::as_span(vg.grad), std::span<double>(out.rows.row(static_cast<Eigen::Index>(i)).data(), n));
  }
  const double inv_n = 1.0 / static_cast<double>(batch.count);
  out.loss *= inv_n;
  if (!std::isfinite(out.loss)) throw Error(ErrorCode::NonFiniteLoss, "mean loss is not finite");
  for (Eigen::Index i = 0; i < out.rows.rows(); ++i) out.grad += out.rows.row(i).transpose();
  out.grad *= inv_n;
  return out;
}

inline constexpr std::size_t kDefaultJacobianCapBytes = std::size_t{2} << 30;

/// Stacked output Jacobian (N*c x n): row i*c + j holds d(yhat_i)_j / d theta,
/// from one reverse pass per output component.
inline Matrix output_jacobian(const Network& net, const Vector& theta, const Batch& batch,
                              std::size_t cap_bytes = kDefaultJacobianCapBytes) {
  detail::check_batch(net, batch);
  const std::size_t c = net.output_size();
  const auto n = static_cast<std::size_t>(theta.size());
  const long double bytes = static_cast<long double>(batch.count) * c * n * sizeof(double);
  if (bytes > static_cast<long double>(cap_bytes))
    throw Error(ErrorCode::JacobianTooLarge, "Jacobian needs " + std::to_string(static_cast<double>(bytes)) +
                                                 " bytes, cap is " + std::to_string(cap_bytes));
  detail::Evaluator eval(net, detail::as_span(theta));
  Matrix jac = Matrix::Zero(static_cast<Eigen::Index>(batch.count * c), theta.size());
  std::vector<double> seed(c, 0.0);
  for (std::size_t i = 0; i < batch.count; ++i) {
    eval.forward(batch.input(i));
    for (std::size_t j = 0; j < c; ++j) {
      seed[j] = 1.0;
      eval.backward(seed, std::span<double>(jac.row(static_cast<Eigen::Index>(i * c + j)).data(), n));
      seed[j] = 0.0;
    }
  }
  return jac;
}

/// Matrix-free generalized Gauss-Newton product (1/N) sum J_i^T H_i J_i v:
/// forward tangent for J_i v, output Hessian, then one reverse pass.
inline Vector gn_vector_product(const Network& net, const Vector& theta, const Batch& batch, LossKind loss,
                                const Vector& v) {
  detail::check_batch(net, batch);
  if (v.size() != theta.size())
    throw Error(ErrorCode::ShapeMismatch, "direction has length " + std::to_string(v.size()) + ", expected " +
                                              std::to_string(theta.size()));
  detail::Evaluator eval(net, detail::as_span(theta));
  Vector out = Vector::Zero(theta.size());
  std::vector<double> hu(net.output_size());
  const double inv_n = 1.0 / static_cast<double>(batch.count);
  for (std::size_t i = 0; i < batch.count; ++i) {
    const auto y = eval.forward(batch.input(i));
    const auto u = eval.tangent(detail::as_span(v));
    apply_output_hessian(loss, y, u, hu);
    eval.backward(hu, detail::as_span(out), inv_n);
  }
  return out;
}

/// Mean loss from forward passes only. Returns NaN/inf rather than throwing
/// when the loss is not finite.
inline double batch_loss(const Network& net, const Vector& theta, const Batch& batch, LossKind loss) {
  detail::check_batch(net, batch);
  detail::check_targets(net, batch);
  detail::Evaluator eval(net, detail::as_span(theta));
  double sum = 0.0;
  for (std::size_t i = 0; i < batch.count; ++i) sum += loss_value(loss, eval.forward(batch.input(i)), batch.target(i));
  return sum / static_cast<double>(batch.count);
}

/// Which side of every non-smooth point the batch sits on: the sign of each
/// LeakyReLU pre-activation and every max-pool winner. Two parameter vectors
/// with equal signatures lie in the same smooth piece of the loss.
inline std::vector<std::size_t> kink_signature(const Network& net, const Vector& theta, const Batch& batch) {
  detail::check_batch(net, batch);
  detail::Evaluator eval(net, detail::as_span(theta));
  const auto& layers = net.layers();
  std::vector<std::size_t> sig;
  for (std::size_t i = 0; i < batch.count; ++i) {
    eval.forward(batch.input(i));
    const auto& tape = eval.tape();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const Activation* act = nullptr;
      if (const auto* d = std::get_if<Dense>(&layers[l].spec)) act = &d->act;
      if (const auto* c = std::get_if<Conv2d>(&layers[l].spec)) act = &c->act;
      if (act && act->kind == ActivationKind::LeakyReLU)
        for (double z : tape.pre[l]) sig.push_back(z >= 0.0);
      sig.insert(sig.end(), tape.argmax[l].begin(), tape.argmax[l].end());
    }
  }
  return sig;
}

struct Evaluation {
  double loss = 0.0;
  double accuracy = std::numeric_limits<double>::quiet_NaN();  // classification only
};

/// Mean loss and (for cross-entropy) argmax accuracy against one-hot targets.
inline Evaluation evaluate(const Network& net, const Vector& theta, const Batch& batch, LossKind loss) {
  detail::check_batch(net, batch);
  detail::check_targets(net, batch);
  detail::Evaluator eval(net, detail::as_span(theta));
  double sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < batch.count; ++i) {
    const auto y = eval.forward(batch.input(i));
    const auto t = batch.target(i);
    sum += loss_value(loss, y, t);
    if (loss == LossKind::SoftmaxCrossEntropy) {
      const auto pred = std::max_element(y.begin(), y.end()) - y.begin();
      const auto truth = std::max_element(t.begin(), t.end()) - t.begin();
      if (pred == truth) ++correct;
    }
  }
  Evaluation out;
  out.loss = sum / static_cast<double>(batch.count);
  if (loss == LossKind::SoftmaxCrossEntropy)
    out.accuracy = static_cast<double>(correct) / static_cast<double>(batch.count);
  return out;
}

/// The two reference architectures.
inline Network make_mlp(std::size_t inputs, std::size_t hidden, std::size_t outputs,
                        Activation act = Activation::elu()) {
  return Network(Shape{inputs, 1, 1}, {Dense{inputs, hidden, act}, Dense{hidden, outputs, Activation::identity()}});
}

/// Conv(1->8, 5x5) + LeakyReLU + MaxPool(2) + Conv(8->8, 5x5) + LeakyReLU + MaxPool(2)
/// + Flatten + Dense(128 -> 10), for 28x28 single-channel images.
inline Network make_mnist_cnn(std::size_t channels = 8, double slope = 0.1) {
  const auto act = Activation::leaky_relu(slope);
  return Network(Shape{1, 28, 28}, {Conv2d{1, channels, 5, 1, act}, MaxPool2d{2}, Conv2d{channels, channels, 5, 1, act},
                                     MaxPool2d{2}, Flatten{}, Dense{channels * 16, 10, Activation::identity()}});
}

}  // namespace lmnn
