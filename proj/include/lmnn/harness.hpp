#pragma once

// Experiment runner: line-based configs, training loops for every
// optimizer, per-iteration CSV logs and SVG convergence plots.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lmnn/data.hpp"
#include "lmnn/errors.hpp"
#include "lmnn/net.hpp"
#include "lmnn/optim_baselines.hpp"
#include "lmnn/optim_lm.hpp"

namespace lmnn {

enum class Task { Sine, Mnist };
enum class OptimizerKind { LM, SGD, Adam, LBFGS, HF };

inline std::string_view to_string(Task t) { return t == Task::Sine ? "sine" : "mnist"; }

inline std::string_view to_string(OptimizerKind o) {
  switch (o) {
    case OptimizerKind::LM: return "lm";
    case OptimizerKind::SGD: return "sgd";
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::LBFGS: return "lbfgs";
    case OptimizerKind::HF: return "hf";
  }
  return "?";
}

struct ExperimentConfig {
  Task task = Task::Sine;
  OptimizerKind optimizer = OptimizerKind::LM;
  std::uint64_t seed = 42;
  std::size_t iterations = 100;
  std::size_t epochs = 0;      // > 0 replaces `iterations` by epochs * batches per epoch
  std::size_t batch_size = 0;  // 0 trains on the full set every iteration
  std::size_t eval_every = 1;
  double stop_test_acc = 0.0;  // stop at the first evaluation reaching it; 0 never stops
  std::string out;             // CSV path, empty for none

  std::size_t sine_train = 400;
  std::size_t sine_test = 200;
  double sine_lo = -2.0 * std::numbers::pi;
  double sine_hi = 2.0 * std::numbers::pi;
  double sine_sigma = 0.1;
  bool sine_normalize = true;  // map inputs affinely onto [-1, 1]
  std::size_t hidden = 32;

  std::string mnist_dir = "data/mnist-sample";
  std::size_t mnist_train_subset = 2000;  // 0 keeps every sample
  std::size_t mnist_test_subset = 1000;
  std::size_t cnn_channels = 8;
  double leaky_slope = 0.1;

  LMConfig lm;
  SGDConfig sgd;
  AdamConfig adam;
  LBFGSConfig lbfgs;
  HFConfig hf;

  void validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidArgument, msg); };
    if (epochs == 0 && iterations == 0) fail("iterations and epochs are both 0");
    if (eval_every == 0) fail("eval_every must be >= 1");
    if (!(stop_test_acc >= 0.0 && stop_test_acc <= 1.0)) fail("stop_test_acc must lie in [0, 1]");
    if (sine_train == 0 || sine_test == 0) fail("sine_train and sine_test must be >= 1");
    if (!(sine_lo < sine_hi)) fail("sine_lo must be < sine_hi");
    if (!(sine_sigma >= 0.0)) fail("sine_sigma must be >= 0");
    if (hidden == 0 || cnn_channels == 0) fail("hidden and cnn_channels must be >= 1");
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) fail("leaky_slope must lie in (0, 1)");
    lm.validate();
    if (!(sgd.lr > 0.0) || !(sgd.momentum >= 0.0 && sgd.momentum < 1.0) || !(sgd.weight_decay >= 0.0))
      fail("sgd needs lr > 0, momentum in [0, 1) and weight_decay >= 0");
    if (!(adam.lr > 0.0) || !(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0) ||
        !(adam.eps > 0.0))
      fail("adam needs lr > 0, betas in [0, 1) and eps > 0");
    if (!(lbfgs.lr > 0.0)) fail("lbfgs_lr must be positive");
    if (!(hf.lr > 0.0) || hf.cg_max_iters == 0 || !(hf.cg_tol > 0.0) || !(hf.lambda0 > 0.0) ||
        !(hf.lambda_up > 1.0) || !(hf.lambda_down > 1.0) || !(hf.lambda_min > 0.0) || !(hf.lambda_max >= hf.lambda_min))
      fail("hf settings out of range");
  }
};

namespace detail {

enum class KeyGroup { Any, LM, SGD, Adam, LBFGS, HF };

inline std::optional<OptimizerKind> group_optimizer(KeyGroup g) {
  switch (g) {
    case KeyGroup::LM: return OptimizerKind::LM;
    case KeyGroup::SGD: return OptimizerKind::SGD;
    case KeyGroup::Adam: return OptimizerKind::Adam;
    case KeyGroup::LBFGS: return OptimizerKind::LBFGS;
    case KeyGroup::HF: return OptimizerKind::HF;
    case KeyGroup::Any: break;
  }
  return std::nullopt;
}

struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

inline std::string at_line(std::size_t line) { return "line " + std::to_string(line) + ": "; }

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline double parse_double(const ConfigEntry& e) {
  double v = 0.0;
  const char* end = e.value.data() + e.value.size();
  const auto [ptr, ec] = std::from_chars(e.value.data(), end, v);
  if (ec != std::errc() || ptr != end)
    throw Error(ErrorCode::TypeError, at_line(e.line) + e.key + " expects a number, got '" + e.value + "'");
  return v;
}

inline std::uint64_t parse_u64(const ConfigEntry& e) {
  std::uint64_t v = 0;
  const char* end = e.value.data() + e.value.size();
  const auto [ptr, ec] = std::from_chars(e.value.data(), end, v);
  if (ec != std::errc() || ptr != end)
    throw Error(ErrorCode::TypeError, at_line(e.line) + e.key + " expects a non-negative integer, got '" + e.value + "'");
  return v;
}

inline bool parse_bool(const ConfigEntry& e) {
  if (e.value == "true" || e.value == "on" || e.value == "yes" || e.value == "1") return true;
  if (e.value == "false" || e.value == "off" || e.value == "no" || e.value == "0") return false;
  throw Error(ErrorCode::TypeError, at_line(e.line) + e.key + " expects true or false, got '" + e.value + "'");
}

template <typename T>
T parse_choice(const ConfigEntry& e, std::initializer_list<std::pair<std::string_view, T>> choices) {
  std::string names;
  for (const auto& [name, value] : choices) {
    if (e.value == name) return value;
    names += names.empty() ? std::string(name) : ", " + std::string(name);
  }
  throw Error(ErrorCode::UnknownValue, at_line(e.line) + e.key + " = " + e.value + " is not one of " + names);
}

struct KeySpec {
  KeyGroup group;
  std::function<void(ExperimentConfig&, const ConfigEntry&)> set;
};

inline const std::map<std::string, KeySpec, std::less<>>& config_keys() {
  using G = KeyGroup;
  using C = ExperimentConfig;
  using E = ConfigEntry;
  auto num = [](double C::*field) { return [field](C& c, const E& e) { c.*field = parse_double(e); }; };
  auto count = [](std::size_t C::*field) {
    return [field](C& c, const E& e) { c.*field = static_cast<std::size_t>(parse_u64(e)); };
  };
  static const std::map<std::string, KeySpec, std::less<>> keys = {
      {"task", {G::Any, [](C& c, const E& e) { c.task = parse_choice<Task>(e, {{"sine", Task::Sine}, {"mnist", Task::Mnist}}); }}},
      {"optimizer",
       {G::Any, [](C& c, const E& e) {
          c.optimizer = parse_choice<OptimizerKind>(e, {{"lm", OptimizerKind::LM},
                                                        {"sgd", OptimizerKind::SGD},
                                                        {"adam", OptimizerKind::Adam},
                                                        {"lbfgs", OptimizerKind::LBFGS},
                                                        {"hf", OptimizerKind::HF}});
        }}},
      {"seed", {G::Any, [](C& c, const E& e) { c.seed = parse_u64(e); }}},
      {"iterations", {G::Any, count(&C::iterations)}},
      {"epochs", {G::Any, count(&C::epochs)}},
      {"batch_size", {G::Any, count(&C::batch_size)}},
      {"eval_every", {G::Any, count(&C::eval_every)}},
      {"stop_test_acc", {G::Any, num(&C::stop_test_acc)}},
      {"out", {G::Any, [](C& c, const E& e) { c.out = e.value; }}},
      {"sine_train", {G::Any, count(&C::sine_train)}},
      {"sine_test", {G::Any, count(&C::sine_test)}},
      {"sine_lo", {G::Any, num(&C::sine_lo)}},
      {"sine_hi", {G::Any, num(&C::sine_hi)}},
      {"sine_sigma", {G::Any, num(&C::sine_sigma)}},
      {"sine_normalize", {G::Any, [](C& c, const E& e) { c.sine_normalize = parse_bool(e); }}},
      {"hidden", {G::Any, count(&C::hidden)}},
      {"mnist_dir", {G::Any, [](C& c, const E& e) { c.mnist_dir = e.value; }}},
      {"mnist_train_subset", {G::Any, count(&C::mnist_train_subset)}},
      {"mnist_test_subset", {G::Any, count(&C::mnist_test_subset)}},
      {"cnn_channels", {G::Any, count(&C::cnn_channels)}},
      {"leaky_slope", {G::Any, num(&C::leaky_slope)}},

      {"lambda0", {G::LM, [](C& c, const E& e) { c.lm.lambda0 = parse_double(e); }}},
      {"lr0", {G::LM, [](C& c, const E& e) { c.lm.lr0 = parse_double(e); }}},
      {"lambda_up", {G::LM, [](C& c, const E& e) { c.lm.lambda_up = parse_double(e); }}},
      {"lambda_down", {G::LM, [](C& c, const E& e) { c.lm.lambda_down = parse_double(e); }}},
      {"lambda_min", {G::LM, [](C& c, const E& e) { c.lm.lambda_min = parse_double(e); }}},
      {"lambda_max", {G::LM, [](C& c, const E& e) { c.lm.lambda_max = parse_double(e); }}},
      {"momentum", {G::LM, [](C& c, const E& e) { c.lm.momentum_enabled = parse_bool(e); }}},
      {"deltaP", {G::LM, [](C& c, const E& e) { c.lm.delta_p = parse_double(e); }}},
      {"deltaP_scale",
       {G::LM, [](C& c, const E& e) {
          c.lm.delta_p_relative = parse_choice<bool>(e, {{"relative", true}, {"absolute", false}});
        }}},
      {"xi", {G::LM, [](C& c, const E& e) { c.lm.xi = parse_double(e); }}},
      {"uphill_b", {G::LM, [](C& c, const E& e) { c.lm.uphill_b = parse_double(e); }}},
      {"uphill_mode",
       {G::LM, [](C& c, const E& e) {
          c.lm.uphill_mode =
              parse_choice<UphillMode>(e, {{"last", UphillMode::Last}, {"min_history", UphillMode::MinHistory}});
        }}},
      {"linesearch", {G::LM, [](C& c, const E& e) { c.lm.linesearch_enabled = parse_bool(e); }}},
      {"ce_curvature",
       {G::LM, [](C& c, const E& e) {
          c.lm.ce_curvature = parse_choice<CeCurvature>(
              e, {{"outer_products", CeCurvature::OuterProducts}, {"exact", CeCurvature::Exact}});
        }}},
      {"jacobian_cap_mb",
       {G::LM, [](C& c, const E& e) { c.lm.jacobian_cap_bytes = static_cast<std::size_t>(parse_u64(e)) << 20; }}},

      {"sgd_lr", {G::SGD, [](C& c, const E& e) { c.sgd.lr = parse_double(e); }}},
      {"sgd_momentum", {G::SGD, [](C& c, const E& e) { c.sgd.momentum = parse_double(e); }}},
      {"sgd_weight_decay", {G::SGD, [](C& c, const E& e) { c.sgd.weight_decay = parse_double(e); }}},

      {"adam_lr", {G::Adam, [](C& c, const E& e) { c.adam.lr = parse_double(e); }}},
      {"adam_beta1", {G::Adam, [](C& c, const E& e) { c.adam.beta1 = parse_double(e); }}},
      {"adam_beta2", {G::Adam, [](C& c, const E& e) { c.adam.beta2 = parse_double(e); }}},
      {"adam_eps", {G::Adam, [](C& c, const E& e) { c.adam.eps = parse_double(e); }}},

      {"lbfgs_lr", {G::LBFGS, [](C& c, const E& e) { c.lbfgs.lr = parse_double(e); }}},
      {"lbfgs_memory", {G::LBFGS, [](C& c, const E& e) { c.lbfgs.memory = static_cast<std::size_t>(parse_u64(e)); }}},

      {"hf_lr", {G::HF, [](C& c, const E& e) { c.hf.lr = parse_double(e); }}},
      {"hf_cg_max_iters", {G::HF, [](C& c, const E& e) { c.hf.cg_max_iters = static_cast<std::size_t>(parse_u64(e)); }}},
      {"hf_cg_tol", {G::HF, [](C& c, const E& e) { c.hf.cg_tol = parse_double(e); }}},
      {"hf_lambda0", {G::HF, [](C& c, const E& e) { c.hf.lambda0 = parse_double(e); }}},
      {"hf_lambda_up", {G::HF, [](C& c, const E& e) { c.hf.lambda_up = parse_double(e); }}},
      {"hf_lambda_down", {G::HF, [](C& c, const E& e) { c.hf.lambda_down = parse_double(e); }}},
      {"hf_lambda_min", {G::HF, [](C& c, const E& e) { c.hf.lambda_min = parse_double(e); }}},
      {"hf_lambda_max", {G::HF, [](C& c, const E& e) { c.hf.lambda_max = parse_double(e); }}},
  };
  return keys;
}

}  // namespace detail

/// Parses `key = value` lines; `#` starts a comment. Missing keys keep their
/// defaults. Optimizer-specific keys must match the chosen optimizer.
inline ExperimentConfig parse_config(std::string_view text) {
  using detail::at_line;
  std::vector<detail::ConfigEntry> entries;
  std::map<std::string, std::size_t, std::less<>> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw Error(ErrorCode::ParseError, at_line(line_no) + "expected 'key = value', got '" + std::string(line) + "'");
    const std::string key(detail::trim(line.substr(0, eq)));
    const std::string value(detail::trim(line.substr(eq + 1)));
    if (key.empty()) throw Error(ErrorCode::ParseError, at_line(line_no) + "missing key before '='");
    if (value.empty()) throw Error(ErrorCode::ParseError, at_line(line_no) + "missing value for " + key);
    if (!detail::config_keys().contains(key)) throw Error(ErrorCode::UnknownKey, at_line(line_no) + "unknown key '" + key + "'");
    if (const auto it = seen.find(key); it != seen.end())
      throw Error(ErrorCode::ParseError,
                  at_line(line_no) + key + " already set on line " + std::to_string(it->second));
    seen.emplace(key, line_no);
    entries.push_back({key, value, line_no});
  }

  ExperimentConfig cfg;
  for (const auto& e : entries) detail::config_keys().find(e.key)->second.set(cfg, e);
  for (const auto& e : entries) {
    const auto owner = detail::group_optimizer(detail::config_keys().find(e.key)->second.group);
    if (owner && *owner != cfg.optimizer)
      throw Error(ErrorCode::UnknownKey, at_line(e.line) + e.key + " configures " + std::string(to_string(*owner)) +
                                             " but optimizer is " + std::string(to_string(cfg.optimizer)));
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open config " + path);
  std::ostringstream text;
  text << in.rdbuf();
  try {
    return parse_config(text.str());
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + std::string(e.what()).substr(to_string(e.code()).size() + 2));
  }
}

/// Config errors (exit code 1) as opposed to failures while running.
inline bool is_config_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::ParseError:
    case ErrorCode::UnknownKey:
    case ErrorCode::UnknownValue:
    case ErrorCode::TypeError:
    case ErrorCode::InvalidArgument:
      return true;
    default:
      return false;
  }
}

struct RunRecord {
  std::size_t iter = 0;
  double epoch = 0.0;
  double wall_time_s = 0.0;
  double train_loss = 0.0;
  std::optional<double> train_acc;
  std::optional<double> test_loss;
  std::optional<double> test_acc;
  std::optional<double> lambda;
  std::optional<bool> accepted;
  std::optional<double> lr_used;
  std::optional<double> step_norm;
};

inline constexpr std::string_view kCsvHeader =
    "iter,epoch,wall_time_s,train_loss,train_acc,test_loss,test_acc,lambda,accepted,lr_used,step_norm";

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_row(const RunRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
  char wall[32];
  std::snprintf(wall, sizeof wall, "%.6f", r.wall_time_s);
  std::string row = std::to_string(r.iter);
  for (const std::string& cell :
       {format_number(r.epoch), std::string(wall), format_number(r.train_loss), opt(r.train_acc),
        opt(r.test_loss), opt(r.test_acc), opt(r.lambda),
        r.accepted ? std::string(*r.accepted ? "1" : "0") : std::string(), opt(r.lr_used), opt(r.step_norm)})
    row += "," + cell;
  return row;
}

/// Writes the header on construction and flushes after every row.
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : out_(path) {
    if (!out_) throw Error(ErrorCode::IoError, "cannot write " + path);
    out_ << kCsvHeader << '\n' << std::flush;
  }

  void write(const RunRecord& r) {
    out_ << csv_row(r) << '\n' << std::flush;
    if (!out_) throw Error(ErrorCode::IoError, "write failed");
  }

 private:
  std::ofstream out_;
};

struct Problem {
  Network net;
  LossKind loss = LossKind::MSE;
  Dataset train;
  Dataset test;
  std::vector<Batch> batches;  // one epoch, cycled in order
};

inline void normalize_sine_inputs(Dataset& ds, double lo, double hi) {
  for (double& x : ds.samples.inputs) x = (2.0 * x - (lo + hi)) / (hi - lo);
}

inline Dataset load_mnist_split(const std::string& dir, bool train) {
  const auto images = std::filesystem::path(dir) / kMnistFileNames[train ? 0 : 2];
  const auto labels = std::filesystem::path(dir) / kMnistFileNames[train ? 1 : 3];
  for (const auto& p : {images, labels})
    if (!std::filesystem::exists(p))
      throw Error(ErrorCode::IoError, "missing " + p.string() + "; mnist_dir must hold " + kMnistFileNames[0] + ", " +
                                          kMnistFileNames[1] + ", " + kMnistFileNames[2] + " and " + kMnistFileNames[3]);
  return load_mnist_idx(images.string(), labels.string());
}

inline Problem build_problem(const ExperimentConfig& cfg) {
  if (cfg.task == Task::Sine) {
    Dataset train = gen_sine(cfg.sine_train, cfg.sine_lo, cfg.sine_hi, cfg.sine_sigma, cfg.seed);
    Dataset test = gen_sine(cfg.sine_test, cfg.sine_lo, cfg.sine_hi, cfg.sine_sigma, cfg.seed + 1);
    if (cfg.sine_normalize) {
      normalize_sine_inputs(train, cfg.sine_lo, cfg.sine_hi);
      normalize_sine_inputs(test, cfg.sine_lo, cfg.sine_hi);
    }
    const std::size_t bs = cfg.batch_size == 0 ? train.size() : cfg.batch_size;
    auto parts = batches(train, bs, cfg.seed);
    if (parts.size() == 1) parts.front() = train.samples;  // keep the generation order for full-batch runs
    return {make_mlp(1, cfg.hidden, 1), LossKind::MSE, std::move(train), std::move(test), std::move(parts)};
  }
  Dataset train = load_mnist_split(cfg.mnist_dir, true);
  Dataset test = load_mnist_split(cfg.mnist_dir, false);
  if (cfg.mnist_train_subset > 0) train = subset(train, cfg.mnist_train_subset, cfg.seed);
  if (cfg.mnist_test_subset > 0) test = subset(test, cfg.mnist_test_subset, cfg.seed);
  const std::size_t bs = cfg.batch_size == 0 ? train.size() : cfg.batch_size;
  auto parts = batches(train, bs, cfg.seed);
  return {make_mnist_cnn(cfg.cnn_channels, cfg.leaky_slope), LossKind::SoftmaxCrossEntropy, std::move(train),
          std::move(test), std::move(parts)};
}

struct RunResult {
  std::vector<RunRecord> records;
  Vector theta;
};

/// Trains per `cfg`. Row 0 holds the initial point; row k follows the k-th
/// update. When `csv_path` is non-empty every row is also written there.
inline RunResult run_experiment(const ExperimentConfig& cfg, const std::string& csv_path) {
  cfg.validate();
  Problem prob = build_problem(cfg);
  const Network& net = prob.net;
  const std::size_t per_epoch = prob.batches.size();
  const std::size_t total = cfg.epochs > 0 ? cfg.epochs * per_epoch : cfg.iterations;
  const bool classify = prob.loss == LossKind::SoftmaxCrossEntropy;

  std::optional<CsvWriter> csv;
  if (!csv_path.empty()) csv.emplace(csv_path);

  RunResult result;
  Vector theta = init_params(net, cfg.seed);
  LMState lm = LMState::initial(theta, cfg.lm);
  Vector velocity = Vector::Zero(theta.size());
  AdamState adam = AdamState::initial(theta.size());
  LBFGSOptimizer lbfgs(cfg.lbfgs);
  HFState hf{cfg.hf.lambda0};

  const auto start = std::chrono::steady_clock::now();
  auto record = [&](RunRecord r, bool eval_test) {
    const auto tr = evaluate(net, theta, prob.train.samples, prob.loss);
    r.train_loss = tr.loss;
    if (classify) r.train_acc = tr.accuracy;
    if (eval_test) {
      const auto te = evaluate(net, theta, prob.test.samples, prob.loss);
      r.test_loss = te.loss;
      if (classify) r.test_acc = te.accuracy;
    }
    r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (csv) csv->write(r);
    result.records.push_back(r);
    return cfg.stop_test_acc > 0.0 && r.test_acc && *r.test_acc >= cfg.stop_test_acc;
  };

  RunRecord first;
  if (cfg.optimizer == OptimizerKind::LM) first.lambda = lm.lambda;
  if (cfg.optimizer == OptimizerKind::HF) first.lambda = hf.lambda;
  bool stop = record(first, true);

  for (std::size_t it = 1; it <= total && !stop; ++it) {
    const Batch& batch = prob.batches[(it - 1) % per_epoch];
    RunRecord r;
    r.iter = it;
    r.epoch = static_cast<double>(it) / static_cast<double>(per_epoch);
    const Vector before = theta;
    switch (cfg.optimizer) {
      case OptimizerKind::LM: {
        const auto rep = lm_step(lm, net, batch, prob.loss, cfg.lm);
        theta = lm.theta;
        r.lambda = lm.lambda;
        r.accepted = rep.accepted;
        r.lr_used = rep.lr_used;
        break;
      }
      case OptimizerKind::SGD:
        sgd_step(theta, grad(net, theta, batch, prob.loss).grad, velocity, cfg.sgd);
        r.lr_used = cfg.sgd.lr;
        break;
      case OptimizerKind::Adam:
        adam_step(theta, grad(net, theta, batch, prob.loss).grad, adam, cfg.adam);
        r.lr_used = cfg.adam.lr;
        break;
      case OptimizerKind::LBFGS:
        lbfgs.step(theta, grad(net, theta, batch, prob.loss).grad);
        r.lr_used = cfg.lbfgs.lr;
        break;
      case OptimizerKind::HF:
        hf_step(hf, theta, net, batch, prob.loss, cfg.hf);
        r.lambda = hf.lambda;
        r.lr_used = cfg.hf.lr;
        break;
    }
    if (!theta.allFinite()) throw Error(ErrorCode::NonFiniteLoss, "parameters became non-finite at iteration " + std::to_string(it));
    r.step_norm = (theta - before).norm();
    stop = record(r, it % cfg.eval_every == 0 || it == total);
  }
  result.theta = std::move(theta);
  return result;
}

inline RunResult run_experiment(const ExperimentConfig& cfg) { return run_experiment(cfg, cfg.out); }

/// Epoch of the first row whose test accuracy reaches `threshold`.
inline std::optional<double> epochs_to_accuracy(const std::vector<RunRecord>& records, double threshold) {
  for (const auto& r : records)
    if (r.test_acc && *r.test_acc >= threshold) return r.epoch;
  return std::nullopt;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column_index(std::string_view name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorCode::MissingColumn, "no column '" + std::string(name) + "'");
    return static_cast<std::size_t>(it - header.begin());
  }

  /// Numeric cells of one column; empty or non-numeric cells become nullopt.
  std::vector<std::optional<double>> column(std::string_view name) const {
    const std::size_t k = column_index(name);
    std::vector<std::optional<double>> out;
    out.reserve(rows.size());
    for (const auto& row : rows) {
      std::optional<double> v;
      if (k < row.size() && !row[k].empty()) {
        double x = 0.0;
        const char* end = row[k].data() + row[k].size();
        const auto [ptr, ec] = std::from_chars(row[k].data(), end, x);
        if (ec == std::errc() && ptr == end) v = x;
      }
      out.push_back(v);
    }
    return out;
  }
};

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  CsvTable t;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (t.header.empty())
      t.header = split_csv_line(line);
    else
      t.rows.push_back(split_csv_line(line));
  }
  if (t.header.empty()) throw Error(ErrorCode::EmptyCSV, path + " has no header");
  return t;
}

struct PlotOptions {
  bool log_y = false;
  std::string x_column = "iter";
  std::string title;
};

namespace detail {

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// Widens a degenerate [lo, hi] so constant data still gets a scale.
inline std::pair<double, double> padded_range(double lo, double hi) {
  if (hi > lo) return {lo, hi};
  const double pad = lo == 0.0 ? 1.0 : 0.1 * std::abs(lo);
  return {lo - pad, hi + pad};
}

}  // namespace detail

/// One polyline per CSV (a dot for a single point), labelled by file stem.
/// Output bytes depend only on the inputs.
inline std::string render_plot(const std::vector<std::string>& csv_paths, const std::string& column,
                               const PlotOptions& opt = {}) {
  using detail::fmt;
  struct Series {
    std::string label;
    std::vector<std::pair<double, double>> points;
  };
  std::vector<Series> series;
  for (const auto& path : csv_paths) {
    const CsvTable t = read_csv(path);
    if (t.rows.empty()) throw Error(ErrorCode::EmptyCSV, path + " has no data rows");
    const auto xs = t.column(opt.x_column);
    const auto ys = t.column(column);
    Series s{std::filesystem::path(path).stem().string(), {}};
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (!xs[i] || !ys[i] || !std::isfinite(*xs[i]) || !std::isfinite(*ys[i])) continue;
      if (opt.log_y && !(*ys[i] > 0.0)) continue;
      s.points.emplace_back(*xs[i], opt.log_y ? std::log10(*ys[i]) : *ys[i]);
    }
    if (s.points.empty()) throw Error(ErrorCode::EmptyCSV, path + " has no plottable values in column " + column);
    series.push_back(std::move(s));
  }

  double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo, y_lo = x_lo, y_hi = -x_lo;
  for (const auto& s : series)
    for (const auto& [x, y] : s.points) {
      x_lo = std::min(x_lo, x);
      x_hi = std::max(x_hi, x);
      y_lo = std::min(y_lo, y);
      y_hi = std::max(y_hi, y);
    }
  std::tie(x_lo, x_hi) = detail::padded_range(x_lo, x_hi);
  std::tie(y_lo, y_hi) = detail::padded_range(y_lo, y_hi);

  constexpr double W = 760, H = 460, left = 80, right = 180, top = 40, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  auto px = [&](double x) { return left + (x - x_lo) / (x_hi - x_lo) * pw; };
  auto py = [&](double y) { return top + (y_hi - y) / (y_hi - y_lo) * ph; };
  static constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                            "#9467bd", "#8c564b", "#e377c2", "#17becf"};

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!opt.title.empty())
    svg << "<text x=\"" << fmt("%.2f", left + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">"
        << detail::xml_escape(opt.title) << "</text>\n";
  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"black\"/>\n";

  constexpr int kTicks = 5;
  for (int k = 0; k <= kTicks; ++k) {
    const double fx = x_lo + (x_hi - x_lo) * k / kTicks;
    const double fy = y_lo + (y_hi - y_lo) * k / kTicks;
    svg << "<line x1=\"" << fmt("%.2f", px(fx)) << "\" y1=\"" << top + ph << "\" x2=\"" << fmt("%.2f", px(fx))
        << "\" y2=\"" << top + ph + 5 << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << fmt("%.2f", px(fx)) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
        << fmt("%.4g", fx) << "</text>\n";
    svg << "<line x1=\"" << left - 5 << "\" y1=\"" << fmt("%.2f", py(fy)) << "\" x2=\"" << left << "\" y2=\""
        << fmt("%.2f", py(fy)) << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << left - 8 << "\" y=\"" << fmt("%.2f", py(fy) + 4) << "\" text-anchor=\"end\">"
        << fmt("%.4g", opt.log_y ? std::pow(10.0, fy) : fy) << "</text>\n";
  }
  svg << "<text x=\"" << fmt("%.2f", left + pw / 2) << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">"
      << detail::xml_escape(opt.x_column) << "</text>\n";
  svg << "<text x=\"18\" y=\"" << fmt("%.2f", top + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << fmt("%.2f", top + ph / 2) << ")\">" << detail::xml_escape(column) << (opt.log_y ? " (log scale)" : "")
      << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* color = kColors[i % std::size(kColors)];
    const auto& pts = series[i].points;
    if (pts.size() == 1) {
      svg << "<circle cx=\"" << fmt("%.2f", px(pts[0].first)) << "\" cy=\"" << fmt("%.2f", py(pts[0].second))
          << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    } else {
      svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t k = 0; k < pts.size(); ++k)
        svg << (k ? " " : "") << fmt("%.2f", px(pts[k].first)) << ',' << fmt("%.2f", py(pts[k].second));
      svg << "\"/>\n";
    }
    const double ly = top + 10 + 20.0 * static_cast<double>(i);
    svg << "<line x1=\"" << left + pw + 15 << "\" y1=\"" << fmt("%.2f", ly) << "\" x2=\"" << left + pw + 40
        << "\" y2=\"" << fmt("%.2f", ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << left + pw + 46 << "\" y=\"" << fmt("%.2f", ly + 4) << "\">"
        << detail::xml_escape(series[i].label) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

inline void emit_plot(const std::vector<std::string>& csv_paths, const std::string& column, const std::string& out_path,
                      const PlotOptions& opt = {}) {
  const std::string svg = render_plot(csv_paths, column, opt);
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + out_path);
  out << svg;
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + out_path);
}

}  // namespace lmnn
